#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "dust/checkpoint.hpp"
#include "dust/gradcheck.hpp"
#include "dust/sampler.hpp"
#include "dust/train.hpp"
#include "dust/world.hpp"

namespace dust {

// Evaluation parallelism cap from DUST_THREADS (0 or unset = serial).
inline int eval_threads() {
    const char* env = std::getenv("DUST_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n <= 1 ? 1 : n;
}

// Deterministic closed-loop evaluation over fixed-seed episodes. Episode i
// always uses start stream seed+i and noise stream seed+1000000+i, so rows
// of a sweep share identical episodes and initial noise.
inline RolloutResult evaluate(const DustModel& model, const WorldConfig& world,
                              const SamplerConfig& sampler_cfg, int n_episodes, uint64_t seed) {
    world.validate();
    sampler_cfg.validate();
    FeatureMap fm(world.feature_map_kind, world.m, world.d_o, world.feature_seed, world.omega_max);
    ContextMaker ctx_maker(world, fm);

    std::vector<EpisodeLog> logs(n_episodes);
    auto run_range = [&](int begin, int end) {
        for (int i = begin; i < end; ++i) {
            SeededRng episode_rng(seed + static_cast<uint64_t>(i));
            SeededRng policy_rng(seed + 1000000 + static_cast<uint64_t>(i));
            Policy policy = [&](const Tensor& ctx, const ToyState& st) {
                Tensor state = tensor({2}, {st.position[0], st.position[1]});
                SampleResult s = sample_joint(model, ctx, state, policy_rng, sampler_cfg);
                return PolicyOutput{s.action, s.future};
            };
            logs[i] = rollout_episode(policy, world, fm, ctx_maker, episode_rng);
        }
    };

    const int threads = std::min(eval_threads(), n_episodes);
    if (threads <= 1) {
        run_range(0, n_episodes);
    } else {
        std::vector<std::thread> pool;
        const int chunk = (n_episodes + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            const int begin = t * chunk;
            const int end = std::min(n_episodes, begin + chunk);
            if (begin < end) pool.emplace_back(run_range, begin, end);
        }
        for (std::thread& th : pool) th.join();
    }
    return aggregate_episodes(std::move(logs));
}

struct SweepRow {
    int n_o = 0;
    int n_a = 0;
    double success_rate = 0.0;
    double wm_embedding_mse = 0.0;
};

// Test-time scaling sweep. Async fixes N_A and sweeps N_o; sync sets
// N_A = N_o. Every row evaluates the same fixed-seed episodes.
inline std::vector<SweepRow> scaling_sweep(const DustModel& model, const WorldConfig& world,
                                           const std::vector<int>& n_o_list, SampleMode mode,
                                           int n_a, int n_episodes, uint64_t seed) {
    std::vector<SweepRow> rows;
    for (int n_o : n_o_list) {
        SamplerConfig cfg;
        cfg.mode = mode;
        cfg.n_o = n_o;
        cfg.n_a = mode == SampleMode::Sync ? n_o : n_a;
        cfg.validate();
        RolloutResult res = evaluate(model, world, cfg, n_episodes, seed);
        rows.push_back({n_o, cfg.n_a, res.success_rate, res.wm_embedding_mse});
    }
    return rows;
}

struct AblationCell {
    ArchMode arch;
    NoiseMode noise;
    double success_rate = 0.0;
    double final_loss_joint = 0.0;
    double final_loss_action = 0.0;
    double final_loss_wm = 0.0;
};

// Table-7(a)-style matrix: {dit, mmdit} x {joint, decoupled} with matched
// seeds and budgets.
inline std::vector<AblationCell> ablation_matrix(const ExperimentConfig& base,
                                                 const ToyDataset& dataset, int n_eval_episodes,
                                                 uint64_t eval_seed,
                                                 const MetricsSink& sink = nullptr) {
    std::vector<AblationCell> cells;
    for (ArchMode arch : {ArchMode::SingleStreamDit, ArchMode::Mmdit}) {
        for (NoiseMode noise : {NoiseMode::Joint, NoiseMode::Decoupled}) {
            ExperimentConfig cfg = base;
            cfg.model.arch_mode = arch;
            cfg.loss.noise_mode = noise;
            TrainResult result = train(cfg, dataset, sink);
            AblationCell cell{arch, noise, 0.0, 0.0, 0.0, 0.0};
            if (!result.metrics.empty()) {
                const MetricsRecord& last = result.metrics.back();
                cell.final_loss_joint = last.loss_joint;
                cell.final_loss_action = last.loss_action;
                cell.final_loss_wm = last.loss_wm;
            }
            cell.success_rate =
                evaluate(result.model, cfg.world, cfg.sampler, n_eval_episodes, eval_seed)
                    .success_rate;
            cells.push_back(cell);
        }
    }
    return cells;
}

// Autodiff-vs-finite-difference check on a compact dual-stream stack through
// the joint loss. Probes `coords_per_seed` random coordinates per seed and
// returns the max relative error.
inline double gradcheck_max_rel_err(uint64_t base_seed, int n_seeds = 20,
                                    int coords_per_seed = 40, double h = 1e-5) {
    double max_err = 0.0;
    for (int s = 0; s < n_seeds; ++s) {
        const uint64_t seed = base_seed + static_cast<uint64_t>(s);
        ModelConfig mc;
        mc.n_mmdit = 2;
        mc.n_dit = 1;
        DustModel model = DustModel::build(mc, seed);
        // Zero-initialized layers have exactly-zero finite differences too,
        // but perturbing them makes the check cover every path.
        SeededRng prng(seed + 71);
        for (auto& [name, p] : model.params.items()) {
            for (double& v : *p.data) v += 0.05 * prng.normal();
        }

        SeededRng rng(seed + 13);
        Tensor ctx = gaussian_sample(rng, {2, mc.d_model});
        Tensor state = gaussian_sample(rng, {mc.d_s});
        Tensor noisy_action = gaussian_sample(rng, {mc.k, mc.d_a});
        Tensor noisy_future = gaussian_sample(rng, {mc.m, mc.d_o});
        Tensor u_a = gaussian_sample(rng, {mc.k, mc.d_a});
        Tensor u_o = gaussian_sample(rng, {mc.m, mc.d_o});
        const double tau_a = rng.uniform();
        const double tau_o = rng.uniform();
        LossConfig loss_cfg;

        auto loss_of = [&](const std::vector<Tensor>& ps) {
            DustModel probe;
            probe.cfg = mc;
            for (size_t i = 0; i < ps.size(); ++i) {
                probe.params.add(model.params.items()[i].first, ps[i]);
            }
            BoundParams bp(probe.params, nullptr);
            ForwardResult pred =
                forward(bp, mc, ctx, state, noisy_action, noisy_future, tau_a, tau_o);
            JointLoss l = joint_loss(pred.pred_a, pred.pred_o, {u_a, u_o}, loss_cfg);
            return l.joint.scalar();
        };

        std::vector<Tensor> values;
        for (const auto& [name, p] : model.params.items()) values.push_back(p);

        Tape tape;
        BoundParams bp(model.params, &tape);
        ForwardResult pred = forward(bp, mc, ctx, state, noisy_action, noisy_future, tau_a, tau_o);
        JointLoss l = joint_loss(pred.pred_a, pred.pred_o, {u_a, u_o}, loss_cfg);
        std::vector<Tensor> grads = tape.gradients(l.joint, bp.all());

        SeededRng coord_rng(seed + 29);
        for (int c = 0; c < coords_per_seed; ++c) {
            const size_t pi = coord_rng.next_u64() % values.size();
            const int ci = static_cast<int>(coord_rng.next_u64() %
                                            static_cast<uint64_t>(values[pi].numel()));
            const double fd = finite_diff_at(loss_of, values, pi, ci, h);
            max_err = std::max(max_err, rel_err(grads[pi].at(ci), fd));
        }
    }
    return max_err;
}

}  // namespace dust
