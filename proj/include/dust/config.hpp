#pragma once

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dust/train.hpp"

namespace dust {

namespace config_detail {

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known,
                           const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw std::runtime_error("config: unknown key '" + section + "." + it.key() + "'");
        }
    }
}

}  // namespace config_detail

inline nlohmann::json model_to_json(const ModelConfig& c) {
    nlohmann::json j;
    j["d_model"] = c.d_model;
    j["n_heads"] = c.n_heads;
    j["n_mmdit"] = c.n_mmdit;
    j["n_dit"] = c.n_dit;
    j["k"] = c.k;
    j["m"] = c.m;
    j["d_a"] = c.d_a;
    j["d_o"] = c.d_o;
    j["d_s"] = c.d_s;
    j["t_hidden"] = c.t_hidden;
    j["d_mlp"] = c.d_mlp;
    j["arch_mode"] = c.arch_mode == ArchMode::Mmdit ? "mmdit" : "single_stream_dit";
    j["adaln_mode"] = c.adaln_mode == AdalnMode::PerModality ? "per_modality" : "global";
    j["interleave_cross"] = c.interleave_cross;
    return j;
}

inline ModelConfig model_from_json(const nlohmann::json& j) {
    config_detail::reject_unknown(
        j,
        {"d_model", "n_heads", "n_mmdit", "n_dit", "k", "m", "d_a", "d_o", "d_s", "t_hidden",
         "d_mlp", "arch_mode", "adaln_mode", "interleave_cross"},
        "model");
    ModelConfig c;
    if (j.contains("d_model")) c.d_model = j["d_model"];
    if (j.contains("n_heads")) c.n_heads = j["n_heads"];
    if (j.contains("n_mmdit")) c.n_mmdit = j["n_mmdit"];
    if (j.contains("n_dit")) c.n_dit = j["n_dit"];
    if (j.contains("k")) c.k = j["k"];
    if (j.contains("m")) c.m = j["m"];
    if (j.contains("d_a")) c.d_a = j["d_a"];
    if (j.contains("d_o")) c.d_o = j["d_o"];
    if (j.contains("d_s")) c.d_s = j["d_s"];
    if (j.contains("t_hidden")) c.t_hidden = j["t_hidden"];
    if (j.contains("d_mlp")) c.d_mlp = j["d_mlp"];
    if (j.contains("arch_mode")) {
        const std::string v = j["arch_mode"];
        if (v == "mmdit") {
            c.arch_mode = ArchMode::Mmdit;
        } else if (v == "single_stream_dit") {
            c.arch_mode = ArchMode::SingleStreamDit;
        } else {
            throw std::runtime_error("config: unknown model.arch_mode '" + v + "'");
        }
    }
    if (j.contains("adaln_mode")) {
        const std::string v = j["adaln_mode"];
        if (v == "per_modality") {
            c.adaln_mode = AdalnMode::PerModality;
        } else if (v == "global") {
            c.adaln_mode = AdalnMode::Global;
        } else {
            throw std::runtime_error("config: unknown model.adaln_mode '" + v + "'");
        }
    }
    if (j.contains("interleave_cross")) c.interleave_cross = j["interleave_cross"];
    return c;
}

inline nlohmann::json train_to_json(const TrainConfig& c) {
    nlohmann::json j;
    j["lr"] = c.lr;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["weight_decay"] = c.weight_decay;
    j["grad_clip_norm"] = c.grad_clip_norm;
    j["steps"] = c.steps;
    j["batch_size"] = c.batch_size;
    j["seed"] = c.seed;
    return j;
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
    config_detail::reject_unknown(j,
                                  {"lr", "beta1", "beta2", "adam_eps", "weight_decay",
                                   "grad_clip_norm", "steps", "batch_size", "seed"},
                                  "train");
    TrainConfig c;
    if (j.contains("lr")) c.lr = j["lr"];
    if (j.contains("beta1")) c.beta1 = j["beta1"];
    if (j.contains("beta2")) c.beta2 = j["beta2"];
    if (j.contains("adam_eps")) c.adam_eps = j["adam_eps"];
    if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"];
    if (j.contains("grad_clip_norm")) c.grad_clip_norm = j["grad_clip_norm"];
    if (j.contains("steps")) c.steps = j["steps"];
    if (j.contains("batch_size")) c.batch_size = j["batch_size"];
    if (j.contains("seed")) c.seed = j["seed"];
    return c;
}

inline nlohmann::json sampler_to_json(const SamplerConfig& c) {
    nlohmann::json j;
    j["n_a"] = c.n_a;
    j["n_o"] = c.n_o;
    j["mode"] = c.mode == SampleMode::Async ? "async" : "sync";
    j["tau_conditioning"] =
        c.tau_conditioning == TauConditioning::Actual ? "actual" : "pseudocode";
    return j;
}

inline SamplerConfig sampler_from_json(const nlohmann::json& j) {
    config_detail::reject_unknown(j, {"n_a", "n_o", "mode", "tau_conditioning"}, "sampler");
    SamplerConfig c;
    if (j.contains("n_a")) c.n_a = j["n_a"];
    if (j.contains("n_o")) c.n_o = j["n_o"];
    if (j.contains("mode")) {
        const std::string v = j["mode"];
        if (v == "async") {
            c.mode = SampleMode::Async;
        } else if (v == "sync") {
            c.mode = SampleMode::Sync;
        } else {
            throw std::runtime_error("config: unknown sampler.mode '" + v + "'");
        }
    }
    if (j.contains("tau_conditioning")) {
        const std::string v = j["tau_conditioning"];
        if (v == "actual") {
            c.tau_conditioning = TauConditioning::Actual;
        } else if (v == "pseudocode") {
            c.tau_conditioning = TauConditioning::Pseudocode;
        } else {
            throw std::runtime_error("config: unknown sampler.tau_conditioning '" + v + "'");
        }
    }
    return c;
}

inline nlohmann::json loss_to_json(const LossConfig& c) {
    nlohmann::json j;
    j["lambda_wm"] = c.lambda_wm;
    j["noise_mode"] = c.noise_mode == NoiseMode::Decoupled ? "decoupled" : "joint";
    switch (c.loss_mode) {
        case LossMode::Full: j["loss_mode"] = "full"; break;
        case LossMode::WmOnly: j["loss_mode"] = "wm_only"; break;
        case LossMode::ActionOnly: j["loss_mode"] = "action_only"; break;
    }
    return j;
}

inline LossConfig loss_from_json(const nlohmann::json& j) {
    config_detail::reject_unknown(j, {"lambda_wm", "noise_mode", "loss_mode"}, "loss");
    LossConfig c;
    if (j.contains("lambda_wm")) {
        c.lambda_wm = j["lambda_wm"];
        if (c.lambda_wm < 0.0) throw std::runtime_error("config: loss.lambda_wm must be >= 0");
    }
    if (j.contains("noise_mode")) {
        const std::string v = j["noise_mode"];
        if (v == "decoupled") {
            c.noise_mode = NoiseMode::Decoupled;
        } else if (v == "joint") {
            c.noise_mode = NoiseMode::Joint;
        } else {
            throw std::runtime_error("config: unknown loss.noise_mode '" + v + "'");
        }
    }
    if (j.contains("loss_mode")) {
        const std::string v = j["loss_mode"];
        if (v == "full") {
            c.loss_mode = LossMode::Full;
        } else if (v == "wm_only") {
            c.loss_mode = LossMode::WmOnly;
        } else if (v == "action_only") {
            c.loss_mode = LossMode::ActionOnly;
        } else {
            throw std::runtime_error("config: unknown loss.loss_mode '" + v + "'");
        }
    }
    return c;
}

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["world"] = world_to_json(c.world);
    j["model"] = model_to_json(c.model);
    j["train"] = train_to_json(c.train);
    j["sampler"] = sampler_to_json(c.sampler);
    j["loss"] = loss_to_json(c.loss);
    return j;
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    config_detail::reject_unknown(j, {"world", "model", "train", "sampler", "loss"}, "");
    ExperimentConfig c;
    if (j.contains("world")) c.world = world_from_json(j["world"]);
    if (j.contains("model")) c.model = model_from_json(j["model"]);
    if (j.contains("train")) c.train = train_from_json(j["train"]);
    if (j.contains("sampler")) c.sampler = sampler_from_json(j["sampler"]);
    if (j.contains("loss")) c.loss = loss_from_json(j["loss"]);
    return c;
}

// Applies a dotted-key override like "train.steps=1". The value is parsed as
// JSON when possible and falls back to a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw std::runtime_error("config: override '" + assignment + "' is not key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    nlohmann::json* cur = &j;
    size_t pos = 0;
    while (true) {
        const size_t dot = key.find('.', pos);
        const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (part.empty()) throw std::runtime_error("config: bad override key '" + key + "'");
        if (dot == std::string::npos) {
            nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
            (*cur)[part] = parsed.is_discarded() ? nlohmann::json(value) : parsed;
            return;
        }
        cur = &(*cur)[part];
        pos = dot + 1;
    }
}

inline ExperimentConfig load_experiment_config(const std::string& path,
                                               const std::vector<std::string>& overrides = {}) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open file " + path);
    nlohmann::json j = nlohmann::json::parse(is);
    for (const std::string& ov : overrides) apply_override(j, ov);
    return experiment_from_json(j);
}

inline nlohmann::json metrics_to_json(const MetricsRecord& r) {
    nlohmann::json j;
    j["step"] = r.step;
    j["loss_joint"] = r.loss_joint;
    j["loss_action"] = r.loss_action;
    j["loss_wm"] = r.loss_wm;
    j["learning_rate"] = r.learning_rate;
    j["grad_norm"] = r.grad_norm;
    j["wall_ms"] = r.wall_ms;
    if (!r.stage.empty()) j["stage"] = r.stage;
    return j;
}

}  // namespace dust
