#pragma once

#include <stdexcept>
#include <vector>

#include "dust/model.hpp"
#include "dust/rng.hpp"
#include "dust/tensor.hpp"

namespace dust {

enum class SampleMode { Async, Sync };

// Literal pseudocode conditioning advances tau_A by the fine step every
// global step; `Actual` conditions the action pathway on the action tokens'
// true noise level (advancing only when the action tokens are updated).
enum class TauConditioning { Actual, Pseudocode };

struct SamplerConfig {
    int n_a = 4;
    int n_o = 4;
    SampleMode mode = SampleMode::Async;
    TauConditioning tau_conditioning = TauConditioning::Actual;

    int q() const { return n_o / n_a; }

    void validate() const {
        if (n_a < 1 || n_o < 1) throw std::runtime_error("SamplerConfig: step counts must be >= 1");
        if (mode == SampleMode::Sync && n_a != n_o) {
            throw std::runtime_error("SamplerConfig: sync mode requires n_a == n_o");
        }
        if (mode == SampleMode::Async && n_o % n_a != 0) {
            throw std::runtime_error("SamplerConfig: async mode requires n_o % n_a == 0");
        }
    }
};

struct TraceStep {
    int global_step = 0;  // 1-indexed
    double tau_a = 0.0;   // conditioning value used at this step
    double tau_o = 0.0;
    bool updated_action = false;
    bool updated_vision = true;
};

struct SampleTrace {
    std::vector<TraceStep> steps;

    int action_updates() const {
        int n = 0;
        for (const TraceStep& s : steps) n += s.updated_action ? 1 : 0;
        return n;
    }
    int vision_updates() const {
        int n = 0;
        for (const TraceStep& s : steps) n += s.updated_vision ? 1 : 0;
        return n;
    }
};

// Pure schedule: action updated at the end of each q-block, i.e. at global
// steps q, 2q, ..., N_o.
inline std::vector<std::pair<int, bool>> update_schedule(const SamplerConfig& cfg) {
    cfg.validate();
    const int q = cfg.q();
    std::vector<std::pair<int, bool>> out;
    out.reserve(cfg.n_o);
    for (int step = 1; step <= cfg.n_o; ++step) {
        out.emplace_back(step, step % q == 0);
    }
    return out;
}

struct SampleResult {
    Tensor action;  // (k, d_a)
    Tensor future;  // (m, d_o)
    SampleTrace trace;
};

// Asynchronous forward-Euler joint sampling. Vision integrates with the fine
// step 1/N_o at every global step; action integrates with 1/N_A once per q
// steps. Timesteps are tracked as integer counters divided at use, so both
// modalities terminate at tau == 1 exactly.
inline SampleResult sample_joint(const DustModel& model, const Tensor& ctx, const Tensor& state,
                                 SeededRng& rng, const SamplerConfig& cfg,
                                 const ForwardOptions& opt = {}) {
    cfg.validate();
    const ModelConfig& c = model.cfg;
    BoundParams bp(model.params, nullptr);
    Tensor action = gaussian_sample(rng, {c.k, c.d_a});
    Tensor future = gaussian_sample(rng, {c.m, c.d_o});

    const int q = cfg.q();
    const double d_tau_o = 1.0 / cfg.n_o;
    const double d_tau_a = 1.0 / cfg.n_a;
    int action_updates = 0;
    SampleResult out;
    for (int step = 1; step <= cfg.n_o; ++step) {
        const double tau_o = static_cast<double>(step - 1) / cfg.n_o;
        const double tau_a = cfg.tau_conditioning == TauConditioning::Actual
                                 ? static_cast<double>(action_updates) / cfg.n_a
                                 : tau_o;
        ForwardResult pred = forward(bp, c, ctx, state, action, future, tau_a, tau_o, opt);
        future = add(future, scale(pred.pred_o, d_tau_o));
        const bool update_action = (step % q == 0);
        if (update_action) {
            action = add(action, scale(pred.pred_a, d_tau_a));
            ++action_updates;
        }
        out.trace.steps.push_back({step, tau_a, tau_o, update_action, true});
    }
    out.action = action;
    out.future = future;
    return out;
}

// Baseline synchronous Euler loop; a separate code path kept
// as a cross-check against sample_joint in sync mode.
inline Tensor sample_action_only(const DustModel& model, const Tensor& ctx, const Tensor& state,
                                 SeededRng& rng, int n_steps) {
    if (n_steps < 1) throw std::runtime_error("sample_action_only: n_steps must be >= 1");
    const ModelConfig& c = model.cfg;
    BoundParams bp(model.params, nullptr);
    Tensor action = gaussian_sample(rng, {c.k, c.d_a});
    Tensor future = gaussian_sample(rng, {c.m, c.d_o});
    const double d_tau = 1.0 / n_steps;
    for (int step = 1; step <= n_steps; ++step) {
        const double tau = static_cast<double>(step - 1) / n_steps;
        ForwardResult pred = forward(bp, c, ctx, state, action, future, tau, tau);
        future = add(future, scale(pred.pred_o, d_tau));
        action = add(action, scale(pred.pred_a, d_tau));
    }
    return action;
}

}  // namespace dust
