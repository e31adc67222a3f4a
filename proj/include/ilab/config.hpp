#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilab/model.hpp"
#include "ilab/selfreward.hpp"
#include "ilab/task.hpp"
#include "ilab/uapo.hpp"
#include "ilab/vib.hpp"

namespace ilab {

// One config file drives every subcommand. Unknown keys are hard errors;
// missing keys take the defaults below. Round-trips losslessly.
struct ExperimentConfig {
    TaskConfig task;
    int corpus_size = 1200;
    FusionStrategy strategy = FusionStrategy::kVibAdaln;
    GroundingMode grounding = GroundingMode::kAcoustic;
    OuPriorConfig ou;
    StageSchedule stage1{1500, 0.08, 16};
    StageSchedule stage2{800, 0.08, 16};
    CollectConfig self_reward;
    UapoConfig uapo;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string out_dir = "runs/out";

    void validate() const;

    nlohmann::ordered_json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);

    static ExperimentConfig load(const std::string& path);
    void save(const std::string& path) const;

    // FNV-1a over the canonical dump; stamped on every report row.
    std::uint64_t hash() const;
    std::string hash_hex() const;
};

} // namespace ilab
