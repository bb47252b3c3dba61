// Acceptance gate: one test per criterion G1-G12, each emitting a single
// PASS/FAIL line with the measured quantity and its pinned tolerance.
// Heavy training runs are shared between criteria where configs coincide.

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "dust/checkpoint.hpp"
#include "dust/config.hpp"
#include "dust/experiments.hpp"

namespace dust {
namespace {

void report(const std::string& id, bool pass, const std::string& detail) {
    std::printf("[%s] %s: %s\n", id.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    EXPECT_TRUE(pass) << id << ": " << detail;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

// ---------------------------------------------------------------------------
// Shared fixtures: the full-budget recipe and memoized training runs
// ---------------------------------------------------------------------------

ExperimentConfig full_recipe(uint64_t seed) {
    ExperimentConfig cfg;  // 4 MMDiT + 2 DiT, decoupled, lambda_wm = 1.0
    cfg.train.steps = 5000;
    cfg.train.batch_size = 64;
    cfg.train.lr = 1e-3;  // tuned for the 5000-step desk budget
    cfg.train.seed = seed;
    return cfg;
}

const ToyDataset& train_dataset() {
    static const ToyDataset ds = [] {
        SeededRng rng(7);
        return generate_dataset(rng, WorldConfig{}, 2000, DatasetVariant::Full);
    }();
    return ds;
}

const ToyDataset& action_free_dataset() {
    static const ToyDataset ds = [] {
        SeededRng rng(8);
        return generate_dataset(rng, WorldConfig{}, 2000, DatasetVariant::ActionFree);
    }();
    return ds;
}

struct RunOutcome {
    DustModel model;
    double train_seconds = 0.0;
    bool aborted = false;
};

// One full-budget training run per (arch, noise, seed), shared across G6/G7/G11.
const RunOutcome& cell_run(ArchMode arch, NoiseMode noise, uint64_t seed) {
    static std::map<std::string, RunOutcome> cache;
    const std::string key = std::string(arch == ArchMode::Mmdit ? "mmdit" : "dit") + "/" +
                            (noise == NoiseMode::Decoupled ? "dec" : "joint") + "/" +
                            std::to_string(seed);
    auto it = cache.find(key);
    if (it == cache.end()) {
        ExperimentConfig cfg = full_recipe(seed);
        cfg.model.arch_mode = arch;
        cfg.loss.noise_mode = noise;
        const double t0 = now_s();
        TrainResult r = train(cfg, train_dataset());
        RunOutcome out;
        out.train_seconds = now_s() - t0;
        out.aborted = r.aborted_non_finite;
        out.model = std::move(r.model);
        it = cache.emplace(key, std::move(out)).first;
        std::printf("  (trained %s in %.0f s)\n", key.c_str(), it->second.train_seconds);
        std::fflush(stdout);
    }
    return it->second;
}

double cell_success(ArchMode arch, NoiseMode noise, uint64_t seed, int episodes) {
    const RunOutcome& run = cell_run(arch, noise, seed);
    if (run.aborted) return 0.0;
    SamplerConfig sampler;  // N_A = N_o = 4, async
    return evaluate(run.model, WorldConfig{}, sampler, episodes, 0).success_rate;
}

// ---------------------------------------------------------------------------

TEST(Acceptance, G1_GradientOracle) {
    const double t0 = now_s();
    const double err = gradcheck_max_rel_err(/*base_seed=*/0, /*n_seeds=*/20,
                                             /*coords_per_seed=*/100);
    const double dt = now_s() - t0;
    const bool pass = err <= 1e-4 && dt <= 60.0;
    report("G1", pass,
           "autodiff vs finite diff max rel err " + fmt(err) + " (tol 1e-4), 20 seeds, " +
               fmt(dt) + " s (limit 60)");
}

TEST(Acceptance, G2_LossDecomposition) {
    SeededRng rng(2);
    double worst = 0.0;
    for (double lambda : {0.0, 0.2, 0.5, 1.0, 2.0}) {
        LossConfig cfg;
        cfg.lambda_wm = lambda;
        for (int i = 0; i < 1000; ++i) {
            VelocityTargets t{gaussian_sample(rng, {4, 2}), gaussian_sample(rng, {4, 8})};
            Tensor pa = gaussian_sample(rng, {4, 2});
            Tensor po = gaussian_sample(rng, {4, 8});
            JointLoss l = joint_loss(pa, po, t, cfg);
            worst = std::max(worst, std::abs(l.joint.scalar() - (l.action.scalar() +
                                                                 lambda * l.wm.scalar())));
        }
    }
    report("G2", worst <= 1e-12,
           "|L_joint - (L_A + lambda*L_WM)| max " + fmt(worst) +
               " over 5000 batches x lambda grid (tol 1e-12)");
}

TEST(Acceptance, G3_SamplerDegeneracy) {
    ModelConfig mc;
    DustModel m = DustModel::build(mc, 33);
    SeededRng prng(34);
    for (auto& [name, p] : m.params.items()) {
        for (double& v : *p.data) v += 0.05 * prng.normal();
    }
    Tensor ctx = zeros({2, mc.d_model});
    Tensor state = zeros({mc.d_s});
    int mismatches = 0;
    for (uint64_t seed = 0; seed < 50; ++seed) {
        SamplerConfig cfg;  // q = 1
        cfg.n_a = 4;
        cfg.n_o = 4;
        SeededRng r1(seed), r2(seed);
        SampleResult joint = sample_joint(m, ctx, state, r1, cfg);
        Tensor sync = sample_action_only(m, ctx, state, r2, 4);
        for (int i = 0; i < sync.numel(); ++i) {
            if (joint.action.at(i) != sync.at(i)) ++mismatches;
        }
    }
    report("G3", mismatches == 0,
           "async q=1 vs synchronous sampler over 50 seeds: " + std::to_string(mismatches) +
               " element mismatches (must be 0, bit-exact)");
}

TEST(Acceptance, G4_ScheduleCounting) {
    bool ok = true;
    std::string detail;
    for (int n_a : {1, 2, 4}) {
        for (int n_o : {4, 16, 32, 64}) {
            if (n_o % n_a != 0) continue;
            SamplerConfig cfg;
            cfg.n_a = n_a;
            cfg.n_o = n_o;
            const int q = cfg.q();
            auto sched = update_schedule(cfg);
            int actions = 0;
            for (const auto& [step, on] : sched) {
                if (on) {
                    ++actions;
                    if (step % q != 0) ok = false;
                }
            }
            if (actions != n_a || static_cast<int>(sched.size()) != n_o) ok = false;
            if (!ok && detail.empty()) {
                detail = "first failure at n_a=" + std::to_string(n_a) +
                         " n_o=" + std::to_string(n_o);
            }
        }
    }
    report("G4", ok,
           ok ? "exhaustive (N_A, N_o) grid: N_A action updates at q, 2q, ..., N_o; N_o vision "
                "updates"
              : detail);
}

TEST(Acceptance, G5_FlowMatchingFixedPoint) {
    const double t0 = now_s();
    // One-datapoint world: a single 1-step episode gives exactly one
    // (context, state, A*, o*) tuple.
    WorldConfig w;
    w.horizon = 1;
    SeededRng gen(5);
    ToyDataset ds = generate_dataset(gen, w, 1, DatasetVariant::Full);

    ExperimentConfig cfg;
    cfg.world = w;
    cfg.model.n_mmdit = 2;
    cfg.model.n_dit = 1;
    cfg.train.steps = 24000;
    cfg.train.batch_size = 16;
    cfg.train.lr = 3e-3;
    cfg.train.seed = 0;
    TrainResult r = train(cfg, ds);
    ASSERT_FALSE(r.aborted_non_finite);

    const ToyEpisode& ep = ds.episodes[0];
    FeatureMap fm(w.feature_map_kind, w.m, w.d_o, w.feature_seed, w.omega_max);
    ContextMaker cm(w, fm);
    Tensor clean_a = ep.action_chunk(0, w.k);
    Tensor clean_o = ep.future_embedding(0, w.k, fm);
    Tensor ctx = cm.make_context({ep.states[0], ep.instruction});
    Tensor state = ep.state_tensor(0);

    SamplerConfig sampler;
    sampler.n_a = 64;
    sampler.n_o = 64;
    SeededRng rng(11);
    SampleResult s = sample_joint(r.model, ctx, state, rng, sampler);
    double l2_a = 0.0, l2_o = 0.0;
    for (int i = 0; i < clean_a.numel(); ++i) {
        l2_a += (s.action.at(i) - clean_a.at(i)) * (s.action.at(i) - clean_a.at(i));
    }
    for (int i = 0; i < clean_o.numel(); ++i) {
        l2_o += (s.future.at(i) - clean_o.at(i)) * (s.future.at(i) - clean_o.at(i));
    }
    l2_a = std::sqrt(l2_a);
    l2_o = std::sqrt(l2_o);
    const double dt = now_s() - t0;
    const bool pass = l2_a <= 1e-2 && l2_o <= 1e-2 && dt <= 300.0;
    report("G5", pass,
           "one-datapoint recovery under N_A=N_o=64: action L2 " + fmt(l2_a) + ", vision L2 " +
               fmt(l2_o) + " (tol 1e-2 each), " + fmt(dt) + " s (limit 300)");
}

TEST(Acceptance, G6_ToyTaskCompetence) {
    const RunOutcome& run = cell_run(ArchMode::Mmdit, NoiseMode::Decoupled, 0);
    SamplerConfig sampler;
    RolloutResult res = evaluate(run.model, WorldConfig{}, sampler, 200, 0);
    const bool pass =
        !run.aborted && res.success_rate >= 0.90 && run.train_seconds <= 1200.0;
    report("G6", pass,
           "full model, 5000 steps, batch 64, seed 0: success_rate " + fmt(res.success_rate) +
               " over 200 episodes (need >= 0.90), train time " + fmt(run.train_seconds) +
               " s (limit 1200)");
}

TEST(Acceptance, G7_AblationDirection) {
    const std::vector<uint64_t> seeds = {0, 1, 2};
    std::map<std::string, double> table;
    double best = 0.0, worst_baseline = 0.0;
    for (ArchMode arch : {ArchMode::SingleStreamDit, ArchMode::Mmdit}) {
        for (NoiseMode noise : {NoiseMode::Joint, NoiseMode::Decoupled}) {
            double sum = 0.0;
            for (uint64_t s : seeds) sum += cell_success(arch, noise, s, 100);
            const double avg = sum / seeds.size();
            const std::string name =
                std::string(arch == ArchMode::Mmdit ? "mmdit" : "dit") + "/" +
                (noise == NoiseMode::Decoupled ? "decoupled" : "joint");
            table[name] = avg;
        }
    }
    best = table["mmdit/decoupled"];
    worst_baseline = table["dit/joint"];
    std::string rows;
    for (const auto& [name, avg] : table) rows += " " + name + "=" + fmt(avg);
    report("G7", best >= worst_baseline,
           "3-seed mean success:" + rows + "; need mmdit/decoupled >= dit/joint");
}

TEST(Acceptance, G8_TransferDirection) {
    const std::vector<uint64_t> seeds = {0, 1, 2};
    double transfer_sum = 0.0, scratch_sum = 0.0;
    for (uint64_t s : seeds) {
        ExperimentConfig pre = full_recipe(s);
        pre.loss.loss_mode = LossMode::WmOnly;
        ExperimentConfig fine = full_recipe(s);
        fine.train.steps = 2500;
        TrainResult transfer =
            pretrain_then_finetune(pre, fine, action_free_dataset(), train_dataset());
        ASSERT_FALSE(transfer.aborted_non_finite);
        SamplerConfig sampler;
        transfer_sum +=
            evaluate(transfer.model, WorldConfig{}, sampler, 100, 0).success_rate;

        ExperimentConfig scratch = full_recipe(s);
        scratch.train.steps = 2500;
        TrainResult base = train(scratch, train_dataset());
        ASSERT_FALSE(base.aborted_non_finite);
        scratch_sum += evaluate(base.model, WorldConfig{}, sampler, 100, 0).success_rate;
    }
    const double transfer_avg = transfer_sum / seeds.size();
    const double scratch_avg = scratch_sum / seeds.size();
    report("G8", transfer_avg >= scratch_avg - 0.02,
           "3-seed mean success: pretrain+finetune " + fmt(transfer_avg) + " vs scratch " +
               fmt(scratch_avg) + " (need transfer >= scratch - 0.02)");
}

TEST(Acceptance, G9_ScalingSweepMechanics) {
    const RunOutcome& run = cell_run(ArchMode::Mmdit, NoiseMode::Decoupled, 0);
    const std::vector<int> grid = {4, 16, 32, 64};
    std::vector<SweepRow> async_rows =
        scaling_sweep(run.model, WorldConfig{}, grid, SampleMode::Async, 4, 100, 0);
    std::vector<SweepRow> sync_rows =
        scaling_sweep(run.model, WorldConfig{}, grid, SampleMode::Sync, 4, 100, 0);
    const bool shapes = async_rows.size() == 4 && sync_rows.size() == 4;
    const bool q1_equal =
        async_rows[0].success_rate == sync_rows[0].success_rate &&
        async_rows[0].wm_embedding_mse == sync_rows[0].wm_embedding_mse;
    const double wm4 = async_rows[0].wm_embedding_mse;
    const double wm64 = async_rows[3].wm_embedding_mse;
    const bool non_degrading = wm64 <= wm4 + 1e-6;
    std::string detail = "async wm_mse N_o=4: " + fmt(wm4) + ", N_o=64: " + fmt(wm64) +
                         " (need <= +1e-6); q=1 rows bit-equal: " +
                         (q1_equal ? "yes" : "no");
    for (size_t i = 0; i < async_rows.size(); ++i) {
        detail += "; async n_o=" + std::to_string(async_rows[i].n_o) + " sr=" +
                  fmt(async_rows[i].success_rate) + " sync sr=" +
                  fmt(sync_rows[i].success_rate);
    }
    report("G9", shapes && q1_equal && non_degrading, detail);
}

TEST(Acceptance, G10_WmOnlyGradientGating) {
    ExperimentConfig cfg;
    cfg.loss.loss_mode = LossMode::WmOnly;
    cfg.train.batch_size = 4;
    DustModel model = DustModel::build(cfg.model, 3);
    // Zero-initialized gates would zero every block-internal gradient at
    // step 0; perturbing all params makes the gating observable on each step.
    SeededRng perturb(42);
    for (auto& [name, p] : model.params.items()) {
        for (double& v : *p.data) v += 0.05 * perturb.normal();
    }
    const ToyDataset& ds = train_dataset();
    FeatureMap fm(ds.world.feature_map_kind, ds.world.m, ds.world.d_o, ds.world.feature_seed,
                  ds.world.omega_max);
    ContextMaker cm(ds.world, fm);
    SeededRng rng(4);
    AdamState opt;
    opt.init(model.params);

    bool decoder_zero = true;
    bool pathway_nonzero = true;
    for (int step = 0; step < 10; ++step) {
        std::vector<Tensor> grad_sum;
        for (const auto& [name, p] : model.params.items()) grad_sum.push_back(zeros(p.shape));
        for (int b = 0; b < cfg.train.batch_size; ++b) {
            TrainBatchItem item = train_detail::draw_example(rng, ds, fm, cm);
            NoisedBatch batch =
                make_noised_batch(rng, cfg.timesteps, item.context, item.state,
                                  item.clean_action, item.clean_future, cfg.loss.noise_mode,
                                  /*force_tau_a=*/0.0);
            ExampleGrads eg = example_gradients(model, batch, cfg.loss);
            for (size_t pi = 0; pi < grad_sum.size(); ++pi) {
                for (int i = 0; i < grad_sum[pi].numel(); ++i) {
                    grad_sum[pi].ptr()[i] += eg.grads[pi].at(i);
                }
            }
        }
        double action_pathway_norm = 0.0;
        for (size_t pi = 0; pi < grad_sum.size(); ++pi) {
            const std::string& name = model.params.items()[pi].first;
            if (name.rfind("dec.action", 0) == 0) {
                for (int i = 0; i < grad_sum[pi].numel(); ++i) {
                    if (grad_sum[pi].at(i) != 0.0) decoder_zero = false;
                }
            }
            if (name.rfind("mmdit.", 0) == 0 && name.find(".a.") != std::string::npos) {
                for (int i = 0; i < grad_sum[pi].numel(); ++i) {
                    action_pathway_norm += grad_sum[pi].at(i) * grad_sum[pi].at(i);
                }
            }
        }
        if (action_pathway_norm <= 0.0) pathway_nonzero = false;
        adamw_step(model.params, grad_sum, opt, cfg.train, cfg.train.lr_at(step));
    }
    report("G10", decoder_zero && pathway_nonzero,
           std::string("wm_only 10-step run: action-decoder grads exact zero (") +
               (decoder_zero ? "yes" : "no") + "), shared action-pathway grads nonzero (" +
               (pathway_nonzero ? "yes" : "no") + ")");
}

TEST(Acceptance, G11_DeterminismAndPersistence) {
    ExperimentConfig cfg = full_recipe(0);
    // Run 1 reuses the shared G6 training; run 2 retrains from scratch.
    const RunOutcome& first = cell_run(ArchMode::Mmdit, NoiseMode::Decoupled, 0);
    TrainResult second = train(cfg, train_dataset());

    const std::string p1 = testing::TempDir() + "acc_run1.dust";
    const std::string p2 = testing::TempDir() + "acc_run2.dust";
    Checkpoint c1;
    c1.config = cfg;
    c1.model = first.model;
    save_checkpoint(c1, p1);
    Checkpoint c2;
    c2.config = cfg;
    c2.model = second.model;
    save_checkpoint(c2, p2);

    auto slurp = [](const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        std::ostringstream ss;
        ss << is.rdbuf();
        return ss.str();
    };
    const bool identical = slurp(p1) == slurp(p2);

    Checkpoint loaded = load_checkpoint(p1);
    SeededRng rng(5);
    Tensor ctx = gaussian_sample(rng, {2, cfg.model.d_model});
    Tensor state = gaussian_sample(rng, {cfg.model.d_s});
    Tensor na = gaussian_sample(rng, {cfg.model.k, cfg.model.d_a});
    Tensor no = gaussian_sample(rng, {cfg.model.m, cfg.model.d_o});
    BoundParams bp1(first.model.params, nullptr);
    BoundParams bp2(loaded.model.params, nullptr);
    ForwardResult f1 = forward(bp1, cfg.model, ctx, state, na, no, 0.3, 0.7);
    ForwardResult f2 = forward(bp2, cfg.model, ctx, state, na, no, 0.3, 0.7);
    bool round_trip = true;
    for (int i = 0; i < f1.pred_a.numel(); ++i) {
        if (f1.pred_a.at(i) != f2.pred_a.at(i)) round_trip = false;
    }
    for (int i = 0; i < f1.pred_o.numel(); ++i) {
        if (f1.pred_o.at(i) != f2.pred_o.at(i)) round_trip = false;
    }
    std::remove(p1.c_str());
    std::remove(p2.c_str());
    report("G11", identical && round_trip,
           std::string("two full runs byte-identical (") + (identical ? "yes" : "no") +
               "), checkpoint round-trip forward bit-exact (" + (round_trip ? "yes" : "no") +
               ")");
}

TEST(Acceptance, G12_TimestepDistribution) {
    TimestepSampler ts;
    SeededRng rng(12);
    double sum = 0.0, mx = 0.0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
        const double tau = sample_timestep(rng, ts);
        sum += tau;
        mx = std::max(mx, tau);
    }
    const double mean = sum / n;
    const bool pass = std::abs(mean - 0.3996) <= 0.002 && mx <= 0.999;
    report("G12", pass,
           "1e6 tau draws: mean " + fmt(mean) + " (target 0.3996 +/- 0.002), max " + fmt(mx) +
               " (limit 0.999)");
}

}  // namespace
}  // namespace dust
