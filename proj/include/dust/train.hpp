#pragma once

#include <cmath>
#include <chrono>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dust/flow.hpp"
#include "dust/model.hpp"
#include "dust/sampler.hpp"
#include "dust/world.hpp"

namespace dust {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.95;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 1e-5;  // skipped for bias parameters
    double grad_clip_norm = 1.0;
    int steps = 5000;
    int batch_size = 64;
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1 || batch_size < 1) {
            throw std::runtime_error("TrainConfig: steps and batch_size must be >= 1");
        }
    }

    int warmup_steps() const { return (steps * 5 + 99) / 100; }  // ceil(0.05 * steps)

    // Cosine decay with linear warmup: 0 at step 0, base lr exactly at the
    // warmup boundary, ~0 at the final step.
    double lr_at(int step) const {
        const int warmup = warmup_steps();
        if (step < warmup) return lr * static_cast<double>(step) / warmup;
        const int span = std::max(1, steps - warmup);
        constexpr double pi = 3.14159265358979323846;
        return lr * 0.5 * (1.0 + std::cos(pi * static_cast<double>(step - warmup) / span));
    }
};

// Full experiment bundle mirroring the config-file sections.
struct ExperimentConfig {
    WorldConfig world;
    ModelConfig model;
    TrainConfig train;
    SamplerConfig sampler;
    LossConfig loss;
    TimestepSampler timesteps;
};

struct MetricsRecord {
    int step = 0;
    double loss_joint = 0.0;
    double loss_action = 0.0;
    double loss_wm = 0.0;
    double learning_rate = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
    std::string stage;  // "", "pretrain", or "finetune"
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

// AdamW with decoupled weight decay; decay is scaled by the scheduled lr and
// skipped for parameters whose name ends in ".b".
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    uint64_t t = 0;

    void init(const ParamStore& params) {
        m.clear();
        v.clear();
        for (const auto& [name, p] : params.items()) {
            m.emplace_back(p.numel(), 0.0);
            v.emplace_back(p.numel(), 0.0);
        }
        t = 0;
    }

    bool initialized() const { return !m.empty(); }
};

inline bool decay_exempt(const std::string& name) {
    return name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
}

inline double global_grad_norm(const std::vector<Tensor>& grads) {
    double sq = 0.0;
    for (const Tensor& g : grads) {
        for (double v : *g.data) sq += v * v;
    }
    return std::sqrt(sq);
}

inline void adamw_step(ParamStore& params, const std::vector<Tensor>& grads, AdamState& opt,
                       const TrainConfig& cfg, double lr_t) {
    ++opt.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(opt.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(opt.t));
    auto& items = params.items();
    for (size_t pi = 0; pi < items.size(); ++pi) {
        const bool decay = !decay_exempt(items[pi].first);
        std::vector<double>& w = *items[pi].second.data;
        const std::vector<double>& g = *grads[pi].data;
        std::vector<double>& m = opt.m[pi];
        std::vector<double>& v = opt.v[pi];
        for (size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double upd = mhat / (std::sqrt(vhat) + cfg.adam_eps);
            if (decay) upd += cfg.weight_decay * w[i];
            w[i] -= lr_t * upd;
        }
    }
}

struct TrainResult {
    DustModel model;
    AdamState opt;
    SeededRng rng{0};
    int step = 0;
    bool aborted_non_finite = false;
    std::vector<MetricsRecord> metrics;
};

// One training example drawn from the dataset: episode index plus a step t.
struct TrainBatchItem {
    Tensor context;
    Tensor state;
    Tensor clean_action;
    Tensor clean_future;
};

namespace train_detail {

inline TrainBatchItem draw_example(SeededRng& rng, const ToyDataset& ds, const FeatureMap& fm,
                                   const ContextMaker& ctx_maker) {
    const ToyEpisode& ep =
        ds.episodes[rng.next_u64() % static_cast<uint64_t>(ds.episodes.size())];
    const int t = static_cast<int>(rng.next_u64() % static_cast<uint64_t>(ep.length()));
    TrainBatchItem item;
    item.state = ep.state_tensor(t);
    item.context = ctx_maker.make_context({ep.states[t], ep.instruction});
    item.clean_action =
        ep.has_actions ? ep.action_chunk(t, ds.world.k) : zeros({ds.world.k, 2});
    item.clean_future = ep.future_embedding(t, ds.world.k, fm);
    return item;
}

}  // namespace train_detail

// Single-example loss + gradient on its own tape; reused by training and by
// gradient-gating inspection.
struct ExampleGrads {
    double loss_joint = 0.0;
    double loss_action = 0.0;
    double loss_wm = 0.0;
    std::vector<Tensor> grads;
};

inline ExampleGrads example_gradients(const DustModel& model, const NoisedBatch& batch,
                                      const LossConfig& loss_cfg) {
    Tape tape;
    BoundParams bp(model.params, &tape);
    ForwardResult pred = forward(bp, model.cfg, batch.context, batch.state, batch.noisy_action,
                                 batch.noisy_future, batch.tau_a, batch.tau_o);
    VelocityTargets targets = velocity_targets(batch);
    JointLoss loss = joint_loss(pred.pred_a, pred.pred_o, targets, loss_cfg);
    ExampleGrads out;
    out.loss_joint = loss.joint.scalar();
    out.loss_action = loss.action.scalar();
    out.loss_wm = loss.wm.scalar();
    out.grads = tape.gradients(loss.joint, bp.all());
    return out;
}

// Training loop: sample batch, modality-decoupled noising,
// forward, joint loss, global-norm clip, AdamW with cosine-warmup lr.
// A non-finite step aborts and returns the last good parameters.
inline TrainResult train(const ExperimentConfig& cfg, const ToyDataset& dataset,
                         const MetricsSink& sink = nullptr,
                         std::optional<DustModel> initial_model = std::nullopt,
                         const std::string& stage = "") {
    cfg.train.validate();
    cfg.model.validate();
    if (dataset.variant == DatasetVariant::ActionFree &&
        cfg.loss.loss_mode != LossMode::WmOnly) {
        throw std::runtime_error("train: action-free dataset requires loss_mode wm_only");
    }
    if (dataset.episodes.empty()) throw std::runtime_error("train: empty dataset");
    if (dataset.world.m != cfg.model.m || dataset.world.d_o != cfg.model.d_o ||
        dataset.world.k != cfg.model.k || dataset.world.d_model != cfg.model.d_model) {
        throw std::runtime_error("train: dataset world dims do not match model config");
    }

    TrainResult result;
    result.model = initial_model ? std::move(*initial_model)
                                 : DustModel::build(cfg.model, cfg.train.seed);
    if (initial_model && !result.model.cfg.same_topology(cfg.model)) {
        throw std::runtime_error("train: initial model topology does not match config");
    }
    result.opt.init(result.model.params);
    result.rng = SeededRng(cfg.train.seed + 1);

    FeatureMap fm(dataset.world.feature_map_kind, dataset.world.m, dataset.world.d_o,
                  dataset.world.feature_seed, dataset.world.omega_max);
    ContextMaker ctx_maker(dataset.world, fm);

    const size_t n_params = result.model.params.size();
    std::vector<std::pair<std::string, Tensor>> last_good;

    for (int step = 0; step < cfg.train.steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        last_good.clear();
        for (const auto& [name, p] : result.model.params.items()) {
            last_good.emplace_back(name, Tensor(p.shape, std::make_shared<std::vector<double>>(*p.data)));
        }

        std::vector<Tensor> grad_sum;
        grad_sum.reserve(n_params);
        for (const auto& [name, p] : result.model.params.items()) grad_sum.push_back(zeros(p.shape));
        double loss_joint = 0.0, loss_action = 0.0, loss_wm = 0.0;

        bool ok = true;
        try {
            for (int b = 0; b < cfg.train.batch_size; ++b) {
                TrainBatchItem item =
                    train_detail::draw_example(result.rng, dataset, fm, ctx_maker);
                const std::optional<double> force_tau_a =
                    cfg.loss.loss_mode == LossMode::WmOnly ? std::optional<double>(0.0)
                                                           : std::nullopt;
                NoisedBatch batch = make_noised_batch(
                    result.rng, cfg.timesteps, item.context, item.state, item.clean_action,
                    item.clean_future, cfg.loss.noise_mode, force_tau_a);
                ExampleGrads eg = example_gradients(result.model, batch, cfg.loss);
                loss_joint += eg.loss_joint;
                loss_action += eg.loss_action;
                loss_wm += eg.loss_wm;
                for (size_t pi = 0; pi < n_params; ++pi) {
                    double* acc = grad_sum[pi].ptr();
                    const double* g = eg.grads[pi].ptr();
                    for (int i = 0; i < grad_sum[pi].numel(); ++i) acc[i] += g[i];
                }
            }
        } catch (const std::exception&) {
            ok = false;
        }
        if (!ok || !std::isfinite(loss_joint)) {
            for (size_t pi = 0; pi < n_params; ++pi) {
                *result.model.params.items()[pi].second.data = *last_good[pi].second.data;
            }
            result.aborted_non_finite = true;
            result.step = step;
            return result;
        }

        const double inv_bs = 1.0 / cfg.train.batch_size;
        for (Tensor& g : grad_sum) {
            for (double& v : *g.data) v *= inv_bs;
        }
        const double gnorm = global_grad_norm(grad_sum);
        if (cfg.train.grad_clip_norm > 0.0 && gnorm > cfg.train.grad_clip_norm) {
            const double sc = cfg.train.grad_clip_norm / gnorm;
            for (Tensor& g : grad_sum) {
                for (double& v : *g.data) v *= sc;
            }
        }
        const double lr_t = cfg.train.lr_at(step);
        adamw_step(result.model.params, grad_sum, result.opt, cfg.train, lr_t);

        MetricsRecord rec;
        rec.step = step;
        rec.loss_joint = loss_joint * inv_bs;
        rec.loss_action = loss_action * inv_bs;
        rec.loss_wm = loss_wm * inv_bs;
        rec.learning_rate = lr_t;
        rec.grad_norm = gnorm;
        rec.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        rec.stage = stage;
        if (sink) sink(rec);
        result.metrics.push_back(rec);
        result.step = step + 1;
    }
    return result;
}

// Stage 1 trains the world-model term only on action-free data; stage 2
// starts from stage-1 parameters with fresh optimizer moments and a
// restarted step counter.
inline TrainResult pretrain_then_finetune(const ExperimentConfig& pre_cfg,
                                          const ExperimentConfig& fine_cfg,
                                          const ToyDataset& pre_dataset,
                                          const ToyDataset& fine_dataset,
                                          const MetricsSink& sink = nullptr) {
    if (pre_cfg.loss.loss_mode != LossMode::WmOnly) {
        throw std::runtime_error("pretrain_then_finetune: pretrain loss_mode must be wm_only");
    }
    if (fine_cfg.loss.loss_mode != LossMode::Full) {
        throw std::runtime_error("pretrain_then_finetune: finetune loss_mode must be full");
    }
    if (!pre_cfg.model.same_topology(fine_cfg.model)) {
        throw std::runtime_error("pretrain_then_finetune: model configs must match");
    }
    TrainResult pre = train(pre_cfg, pre_dataset, sink, std::nullopt, "pretrain");
    if (pre.aborted_non_finite) return pre;
    DustModel seeded = std::move(pre.model);
    seeded.cfg = fine_cfg.model;  // same topology; ablation flags may differ
    TrainResult fine = train(fine_cfg, fine_dataset, sink, std::move(seeded), "finetune");
    fine.metrics.insert(fine.metrics.begin(), pre.metrics.begin(), pre.metrics.end());
    return fine;
}

}  // namespace dust
