#include "ilab/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "ilab/serialize.hpp"

namespace ilab {

void ExperimentConfig::validate() const {
    task.validate();
    ou.validate();
    uapo.validate();
    if (corpus_size < 10) throw ContractViolation("corpus_size must be at least 10");
    if (seeds.empty()) throw ContractViolation("config needs at least one seed");
    if (out_dir.empty()) throw ContractViolation("config needs an output directory");
    if (self_reward.k < 2) throw ContractViolation("self_reward.k must be >= 2");
    if (!(self_reward.tau >= 0.0)) throw ContractViolation("self_reward.tau must be >= 0");
    if (!(self_reward.rollout_temperature > 0.0))
        throw ContractViolation("self_reward.rollout_temperature must be positive");
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
    nlohmann::ordered_json j;
    j["task"] = task_to_json(task);
    j["corpus_size"] = corpus_size;
    j["strategy"] = to_string(strategy);
    j["grounding"] = to_string(grounding);
    j["ou"] = ou_to_json(ou);
    j["stage1"] = schedule_to_json(stage1);
    j["stage2"] = schedule_to_json(stage2);
    j["self_reward"] = {{"k", self_reward.k},
                        {"tau", self_reward.tau},
                        {"rollout_temperature", self_reward.rollout_temperature}};
    j["uapo"] = {{"lambda", uapo.lambda},
                 {"steps", uapo.steps},
                 {"lr", uapo.lr},
                 {"batch_size", uapo.batch_size},
                 {"detach_anchor", uapo.detach_anchor}};
    j["seeds"] = seeds;
    j["out_dir"] = out_dir;
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
    require_keys(j, "config",
                 {"task", "corpus_size", "strategy", "grounding", "ou", "stage1", "stage2",
                  "self_reward", "uapo", "seeds", "out_dir"});
    ExperimentConfig c;
    if (j.contains("task")) c.task = task_from_json(j.at("task"));
    read_key(j, "corpus_size", c.corpus_size);
    if (j.contains("strategy")) c.strategy = fusion_from_string(j.at("strategy").get<std::string>());
    if (j.contains("grounding"))
        c.grounding = grounding_from_string(j.at("grounding").get<std::string>());
    if (j.contains("ou")) c.ou = ou_from_json(j.at("ou"));
    if (j.contains("stage1")) c.stage1 = schedule_from_json(j.at("stage1"), c.stage1);
    if (j.contains("stage2")) c.stage2 = schedule_from_json(j.at("stage2"), c.stage2);
    if (j.contains("self_reward")) {
        const auto& sr = j.at("self_reward");
        require_keys(sr, "self_reward", {"k", "tau", "rollout_temperature"});
        read_key(sr, "k", c.self_reward.k);
        read_key(sr, "tau", c.self_reward.tau);
        read_key(sr, "rollout_temperature", c.self_reward.rollout_temperature);
    }
    if (j.contains("uapo")) {
        const auto& up = j.at("uapo");
        require_keys(up, "uapo", {"lambda", "steps", "lr", "batch_size", "detach_anchor"});
        read_key(up, "lambda", c.uapo.lambda);
        read_key(up, "steps", c.uapo.steps);
        read_key(up, "lr", c.uapo.lr);
        read_key(up, "batch_size", c.uapo.batch_size);
        read_key(up, "detach_anchor", c.uapo.detach_anchor);
    }
    read_key(j, "seeds", c.seeds);
    read_key(j, "out_dir", c.out_dir);
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation("config '" + path + "' is not valid JSON: " + e.what());
    }
    return from_json(j);
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path + "' for writing");
    out << to_json().dump(2) << "\n";
}

std::uint64_t ExperimentConfig::hash() const {
    const std::string s = to_json().dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string ExperimentConfig::hash_hex() const {
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << hash();
    return os.str();
}

} // namespace ilab
