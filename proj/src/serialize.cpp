#include "ilab/serialize.hpp"

namespace ilab {

void require_keys(const nlohmann::json& j, const std::string& ctx,
                  std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ContractViolation("config: '" + ctx + "' must be an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok) throw ContractViolation("config: unknown key '" + key + "' in " + ctx);
    }
}

nlohmann::ordered_json task_to_json(const TaskConfig& t) {
    return {{"n_styles", t.n_styles},
            {"content_vocab", t.content_vocab},
            {"context_vocab", t.context_vocab},
            {"context_len", t.context_len},
            {"seq_len_min", t.seq_len_min},
            {"seq_len_max", t.seq_len_max},
            {"style_noise", t.style_noise},
            {"hidden_dim", t.d_h},
            {"intent_dim", t.d_z},
            {"embed_dim", t.d_e}};
}

TaskConfig task_from_json(const nlohmann::json& j) {
    require_keys(j, "task",
                 {"n_styles", "content_vocab", "context_vocab", "context_len", "seq_len_min",
                  "seq_len_max", "style_noise", "hidden_dim", "intent_dim", "embed_dim"});
    TaskConfig t;
    read_key(j, "n_styles", t.n_styles);
    read_key(j, "content_vocab", t.content_vocab);
    read_key(j, "context_vocab", t.context_vocab);
    read_key(j, "context_len", t.context_len);
    read_key(j, "seq_len_min", t.seq_len_min);
    read_key(j, "seq_len_max", t.seq_len_max);
    read_key(j, "style_noise", t.style_noise);
    read_key(j, "hidden_dim", t.d_h);
    read_key(j, "intent_dim", t.d_z);
    read_key(j, "embed_dim", t.d_e);
    t.validate();
    return t;
}

nlohmann::ordered_json ou_to_json(const OuPriorConfig& c) {
    return {{"alpha", c.alpha},
            {"sigma_p", c.sigma_p},
            {"beta_max", c.beta_max},
            {"warmup_fraction", c.warmup_fraction}};
}

OuPriorConfig ou_from_json(const nlohmann::json& j) {
    require_keys(j, "ou", {"alpha", "sigma_p", "beta_max", "warmup_fraction"});
    OuPriorConfig c;
    read_key(j, "alpha", c.alpha);
    read_key(j, "sigma_p", c.sigma_p);
    read_key(j, "beta_max", c.beta_max);
    read_key(j, "warmup_fraction", c.warmup_fraction);
    c.validate();
    return c;
}

nlohmann::ordered_json schedule_to_json(const StageSchedule& s) {
    return {{"steps", s.steps}, {"lr", s.lr}, {"batch_size", s.batch_size}};
}

StageSchedule schedule_from_json(const nlohmann::json& j, const StageSchedule& defaults) {
    require_keys(j, "stage schedule", {"steps", "lr", "batch_size"});
    StageSchedule s = defaults;
    read_key(j, "steps", s.steps);
    read_key(j, "lr", s.lr);
    read_key(j, "batch_size", s.batch_size);
    if (s.steps < 1 || s.batch_size < 1 || !(s.lr > 0.0))
        throw ContractViolation("stage schedule needs steps >= 1, batch_size >= 1, lr > 0");
    return s;
}

} // namespace ilab
