#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dust/checkpoint.hpp"
#include "dust/config.hpp"
#include "dust/experiments.hpp"

namespace dust {
namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

ToyDataset small_dataset(uint64_t seed = 7, int episodes = 16,
                         DatasetVariant variant = DatasetVariant::Full) {
    SeededRng rng(seed);
    return generate_dataset(rng, WorldConfig{}, episodes, variant);
}

ExperimentConfig tiny_config(int steps = 3, int batch = 4) {
    ExperimentConfig cfg;
    cfg.train.steps = steps;
    cfg.train.batch_size = batch;
    return cfg;
}

TEST(LrSchedule, WarmupAndCosineAnchors) {
    TrainConfig c;
    c.lr = 1e-4;
    c.steps = 5000;
    EXPECT_EQ(c.warmup_steps(), 250);
    EXPECT_DOUBLE_EQ(c.lr_at(0), 0.0);
    EXPECT_DOUBLE_EQ(c.lr_at(250), 1e-4);
    EXPECT_LT(c.lr_at(4999), 1e-8);
    for (int s = 251; s < 5000; s += 97) {
        ASSERT_LE(c.lr_at(s), c.lr_at(s - 1));
    }
    TrainConfig odd;
    odd.steps = 7;  // ceil(0.35) = 1
    EXPECT_EQ(odd.warmup_steps(), 1);
}

TEST(AdamW, ZeroLrIsNoOp) {
    ToyDataset ds = small_dataset();
    ExperimentConfig cfg = tiny_config(1, 2);
    cfg.train.lr = 0.0;
    DustModel before = DustModel::build(cfg.model, cfg.train.seed);
    TrainResult r = train(cfg, ds);
    for (size_t i = 0; i < before.params.size(); ++i) {
        const Tensor& a = before.params.items()[i].second;
        const Tensor& b = r.model.params.items()[i].second;
        for (int j = 0; j < a.numel(); ++j) ASSERT_EQ(a.at(j), b.at(j));
    }
}

TEST(AdamW, DecayExemptionByName) {
    EXPECT_TRUE(decay_exempt("mmdit.0.a.attn.q.b"));
    EXPECT_TRUE(decay_exempt("dec.action.b"));
    EXPECT_FALSE(decay_exempt("dec.action.W"));
    EXPECT_FALSE(decay_exempt("temb.1.W"));
    // Every parameter is either a .W matrix or a .b bias.
    DustModel m = DustModel::build(ModelConfig{}, 0);
    for (const auto& [name, p] : m.params.items()) {
        const bool is_w = name.size() > 2 && name.substr(name.size() - 2) == ".W";
        ASSERT_NE(is_w, decay_exempt(name)) << name;
    }
}

TEST(Train, MetricsPerStepAndDeterminism) {
    ToyDataset ds = small_dataset();
    ExperimentConfig cfg = tiny_config(4, 4);
    std::vector<MetricsRecord> sunk;
    TrainResult a = train(cfg, ds, [&](const MetricsRecord& r) { sunk.push_back(r); });
    EXPECT_EQ(sunk.size(), 4u);
    for (int i = 0; i < 4; ++i) EXPECT_EQ(sunk[i].step, i);

    TrainResult b = train(cfg, ds);
    for (size_t i = 0; i < a.model.params.size(); ++i) {
        const Tensor& ta = a.model.params.items()[i].second;
        const Tensor& tb = b.model.params.items()[i].second;
        for (int j = 0; j < ta.numel(); ++j) ASSERT_EQ(ta.at(j), tb.at(j));
    }
    ASSERT_EQ(a.metrics.size(), b.metrics.size());
    for (size_t i = 0; i < a.metrics.size(); ++i) {
        ASSERT_EQ(a.metrics[i].loss_joint, b.metrics[i].loss_joint);
    }
}

TEST(Train, ActionFreeRequiresWmOnly) {
    ToyDataset ds = small_dataset(7, 8, DatasetVariant::ActionFree);
    ExperimentConfig cfg = tiny_config();
    EXPECT_THROW(train(cfg, ds), std::runtime_error);
    cfg.loss.loss_mode = LossMode::WmOnly;
    EXPECT_NO_THROW(train(cfg, ds));
}

TEST(Train, DimensionMismatchRejected) {
    ToyDataset ds = small_dataset();
    ExperimentConfig cfg = tiny_config();
    cfg.model.m = 16;
    EXPECT_THROW(train(cfg, ds), std::runtime_error);
}

TEST(PretrainFinetune, StageTagsAndRestart) {
    ToyDataset pre_ds = small_dataset(1, 8, DatasetVariant::ActionFree);
    ToyDataset fine_ds = small_dataset(2, 8, DatasetVariant::Full);
    ExperimentConfig pre = tiny_config(3, 2);
    pre.loss.loss_mode = LossMode::WmOnly;
    ExperimentConfig fine = tiny_config(2, 2);
    TrainResult r = pretrain_then_finetune(pre, fine, pre_ds, fine_ds);
    ASSERT_EQ(r.metrics.size(), 5u);
    EXPECT_EQ(r.metrics[0].stage, "pretrain");
    EXPECT_EQ(r.metrics[2].stage, "pretrain");
    EXPECT_EQ(r.metrics[3].stage, "finetune");
    EXPECT_EQ(r.metrics[3].step, 0);  // stage-2 counter restarts
    EXPECT_EQ(r.step, 2);

    ExperimentConfig bad = fine;
    bad.loss.loss_mode = LossMode::WmOnly;
    EXPECT_THROW(pretrain_then_finetune(pre, bad, pre_ds, fine_ds), std::runtime_error);
    ExperimentConfig mismatched = fine;
    mismatched.model.d_model = 32;
    EXPECT_THROW(pretrain_then_finetune(pre, mismatched, pre_ds, fine_ds), std::runtime_error);
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    ToyDataset ds = small_dataset();
    ExperimentConfig cfg = tiny_config(2, 2);
    TrainResult r = train(cfg, ds);
    const std::string p1 = testing::TempDir() + "ck1.dust";
    const std::string p2 = testing::TempDir() + "ck2.dust";
    save_checkpoint(checkpoint_from_train(cfg, std::move(r)), p1);
    Checkpoint loaded = load_checkpoint(p1);
    save_checkpoint(loaded, p2);
    EXPECT_EQ(slurp(p1), slurp(p2));
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST(Checkpoint, RoundTripReproducesForwardBitExactly) {
    ToyDataset ds = small_dataset();
    ExperimentConfig cfg = tiny_config(2, 2);
    TrainResult r = train(cfg, ds);
    DustModel original = r.model;

    const std::string path = testing::TempDir() + "ck_fw.dust";
    save_checkpoint(checkpoint_from_train(cfg, std::move(r)), path);
    Checkpoint loaded = load_checkpoint(path);
    std::remove(path.c_str());

    SeededRng rng(3);
    Tensor ctx = gaussian_sample(rng, {2, cfg.model.d_model});
    Tensor state = gaussian_sample(rng, {cfg.model.d_s});
    Tensor na = gaussian_sample(rng, {cfg.model.k, cfg.model.d_a});
    Tensor no = gaussian_sample(rng, {cfg.model.m, cfg.model.d_o});
    BoundParams bp1(original.params, nullptr);
    BoundParams bp2(loaded.model.params, nullptr);
    ForwardResult f1 = forward(bp1, cfg.model, ctx, state, na, no, 0.3, 0.7);
    ForwardResult f2 = forward(bp2, cfg.model, ctx, state, na, no, 0.3, 0.7);
    for (int i = 0; i < f1.pred_a.numel(); ++i) ASSERT_EQ(f1.pred_a.at(i), f2.pred_a.at(i));
    for (int i = 0; i < f1.pred_o.numel(); ++i) ASSERT_EQ(f1.pred_o.at(i), f2.pred_o.at(i));
}

TEST(Checkpoint, TopologyMismatchRejectedDescriptively) {
    ToyDataset ds = small_dataset();
    ExperimentConfig cfg = tiny_config(1, 2);
    TrainResult r = train(cfg, ds);
    const std::string path = testing::TempDir() + "ck_mm.dust";
    save_checkpoint(checkpoint_from_train(cfg, std::move(r)), path);
    ModelConfig other;
    other.d_model = 32;
    try {
        load_checkpoint(path, other);
        FAIL() << "expected mismatch error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("mismatch"), std::string::npos);
    }
    std::remove(path.c_str());
}

TEST(Config, UnknownKeysRejectedPerSection) {
    nlohmann::json j;
    j["train"] = {{"steps", 10}, {"nope", 1}};
    EXPECT_THROW(experiment_from_json(j), std::runtime_error);
    nlohmann::json top;
    top["unknown_section"] = nlohmann::json::object();
    EXPECT_THROW(experiment_from_json(top), std::runtime_error);
    nlohmann::json ok;
    ok["train"] = {{"steps", 10}};
    EXPECT_EQ(experiment_from_json(ok).train.steps, 10);
}

TEST(Config, EnumParsing) {
    nlohmann::json j;
    j["loss"] = {{"noise_mode", "joint"}, {"loss_mode", "wm_only"}};
    j["model"] = {{"arch_mode", "single_stream_dit"}, {"adaln_mode", "global"}};
    j["sampler"] = {{"mode", "sync"}, {"tau_conditioning", "pseudocode"}};
    ExperimentConfig c = experiment_from_json(j);
    EXPECT_EQ(c.loss.noise_mode, NoiseMode::Joint);
    EXPECT_EQ(c.loss.loss_mode, LossMode::WmOnly);
    EXPECT_EQ(c.model.arch_mode, ArchMode::SingleStreamDit);
    EXPECT_EQ(c.model.adaln_mode, AdalnMode::Global);
    EXPECT_EQ(c.sampler.mode, SampleMode::Sync);
    EXPECT_EQ(c.sampler.tau_conditioning, TauConditioning::Pseudocode);

    j["loss"]["noise_mode"] = "banana";
    EXPECT_THROW(experiment_from_json(j), std::runtime_error);
}

TEST(Config, DottedOverrides) {
    nlohmann::json j = nlohmann::json::object();
    apply_override(j, "train.steps=42");
    apply_override(j, "model.arch_mode=mmdit");
    apply_override(j, "loss.lambda_wm=0.5");
    ExperimentConfig c = experiment_from_json(j);
    EXPECT_EQ(c.train.steps, 42);
    EXPECT_DOUBLE_EQ(c.loss.lambda_wm, 0.5);
    EXPECT_THROW(apply_override(j, "no-equals-sign"), std::runtime_error);
}

TEST(Config, MissingFileNamesPath) {
    try {
        load_experiment_config("/nonexistent/cfg.json");
        FAIL() << "expected error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/cfg.json"), std::string::npos);
    }
}

TEST(Config, ExperimentRoundTrip) {
    ExperimentConfig c;
    c.train.steps = 123;
    c.loss.lambda_wm = 0.25;
    c.model.arch_mode = ArchMode::SingleStreamDit;
    c.sampler.n_o = 16;
    ExperimentConfig r = experiment_from_json(experiment_to_json(c));
    EXPECT_EQ(r.train.steps, 123);
    EXPECT_DOUBLE_EQ(r.loss.lambda_wm, 0.25);
    EXPECT_EQ(r.model.arch_mode, ArchMode::SingleStreamDit);
    EXPECT_EQ(r.sampler.n_o, 16);
}

TEST(Metrics, JsonFields) {
    MetricsRecord r;
    r.step = 5;
    r.loss_joint = 1.5;
    r.stage = "pretrain";
    nlohmann::json j = metrics_to_json(r);
    EXPECT_EQ(j["step"], 5);
    EXPECT_EQ(j["stage"], "pretrain");
    MetricsRecord plain;
    EXPECT_FALSE(metrics_to_json(plain).contains("stage"));
}

TEST(Evaluate, FixedSeedsAreThreadCountInvariant) {
    ExperimentConfig cfg = tiny_config(2, 2);
    ToyDataset ds = small_dataset();
    TrainResult r = train(cfg, ds);

    RolloutResult serial = evaluate(r.model, cfg.world, cfg.sampler, 8, 42);
    setenv("DUST_THREADS", "4", 1);
    RolloutResult parallel = evaluate(r.model, cfg.world, cfg.sampler, 8, 42);
    unsetenv("DUST_THREADS");
    ASSERT_EQ(serial.episodes.size(), parallel.episodes.size());
    EXPECT_EQ(serial.success_rate, parallel.success_rate);
    for (size_t i = 0; i < serial.episodes.size(); ++i) {
        ASSERT_EQ(serial.episodes[i].final_distance, parallel.episodes[i].final_distance);
        ASSERT_EQ(serial.episodes[i].wm_embedding_mse, parallel.episodes[i].wm_embedding_mse);
    }
}

TEST(Sweep, RowShapesAndSharedEpisodes) {
    ExperimentConfig cfg = tiny_config(2, 2);
    ToyDataset ds = small_dataset();
    TrainResult r = train(cfg, ds);
    std::vector<SweepRow> rows =
        scaling_sweep(r.model, cfg.world, {4, 8}, SampleMode::Async, 4, 6, 3);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].n_a, 4);
    EXPECT_EQ(rows[1].n_a, 4);
    std::vector<SweepRow> sync_rows =
        scaling_sweep(r.model, cfg.world, {4, 8}, SampleMode::Sync, 4, 6, 3);
    EXPECT_EQ(sync_rows[1].n_a, 8);
    // q = 1 rows coincide across modes.
    EXPECT_EQ(rows[0].success_rate, sync_rows[0].success_rate);
    EXPECT_EQ(rows[0].wm_embedding_mse, sync_rows[0].wm_embedding_mse);
}

}  // namespace
}  // namespace dust
