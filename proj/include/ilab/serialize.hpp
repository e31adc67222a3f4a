#pragma once

#include <string>

#include "json.hpp"

#include "ilab/faults.hpp"
#include "ilab/model.hpp"
#include "ilab/task.hpp"
#include "ilab/vib.hpp"

namespace ilab {

// Unknown keys are hard errors everywhere a config or artifact file is
// parsed; missing keys fall back to the caller's defaults.
void require_keys(const nlohmann::json& j, const std::string& ctx,
                  std::initializer_list<const char*> allowed);

template <class T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

nlohmann::ordered_json task_to_json(const TaskConfig& t);
TaskConfig task_from_json(const nlohmann::json& j);

nlohmann::ordered_json ou_to_json(const OuPriorConfig& c);
OuPriorConfig ou_from_json(const nlohmann::json& j);

nlohmann::ordered_json schedule_to_json(const StageSchedule& s);
StageSchedule schedule_from_json(const nlohmann::json& j, const StageSchedule& defaults);

} // namespace ilab
