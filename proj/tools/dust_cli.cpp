// Command-line front end: data generation, training, sampling, evaluation,
// sweeps, ablations, and the gradient self-check.

#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dust/checkpoint.hpp"
#include "dust/config.hpp"
#include "dust/experiments.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_config_opts(CLI::App* cmd, CommonOpts& opts, bool require_config) {
    CLI::Option* c = cmd->add_option("--config", opts.config_path, "experiment config JSON");
    if (require_config) c->required();
    cmd->add_option("--set", opts.overrides, "dotted override, e.g. train.steps=100");
}

dust::ExperimentConfig resolve_config(const CommonOpts& opts) {
    if (!opts.config_path.empty()) {
        return dust::load_experiment_config(opts.config_path, opts.overrides);
    }
    nlohmann::json j = nlohmann::json::object();
    for (const std::string& ov : opts.overrides) dust::apply_override(j, ov);
    return dust::experiment_from_json(j);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open output file " + path);
    return os;
}

dust::MetricsSink jsonl_sink(std::ostream& os) {
    return [&os](const dust::MetricsRecord& r) { os << dust::metrics_to_json(r) << "\n"; };
}

nlohmann::json tensor_to_json(const dust::Tensor& t) {
    nlohmann::json j;
    j["shape"] = t.shape;
    j["data"] = *t.data;
    return j;
}

int run(int argc, char** argv) {
    CLI::App app{"dual-stream diffusion on the 2-D point-mass world"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate an expert dataset");
    CommonOpts gen_opts;
    add_config_opts(gen, gen_opts, false);
    std::string gen_out;
    int gen_episodes = 512;
    uint64_t gen_seed = 0;
    std::string gen_variant = "full";
    gen->add_option("--out", gen_out, "output dataset path")->required();
    gen->add_option("--episodes", gen_episodes, "episode count");
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--variant", gen_variant, "full | action_free")
        ->check(CLI::IsMember({"full", "action_free"}));

    // dataset export-json
    auto* dataset = app.add_subcommand("dataset", "dataset utilities");
    auto* export_json = dataset->add_subcommand("export-json", "dump a dataset as JSON");
    std::string exp_in, exp_out;
    export_json->add_option("--in", exp_in, "input dataset path")->required();
    export_json->add_option("--out", exp_out, "output JSON path (default stdout)");
    dataset->require_subcommand(1);

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model");
    CommonOpts train_opts;
    add_config_opts(train_cmd, train_opts, true);
    std::string train_data, train_out, train_metrics, train_init;
    train_cmd->add_option("--data", train_data, "dataset path")->required();
    train_cmd->add_option("--out", train_out, "checkpoint output path")->required();
    train_cmd->add_option("--metrics", train_metrics, "JSON-lines metrics path");
    train_cmd->add_option("--init", train_init, "warm-start checkpoint");

    // pretrain-finetune
    auto* pf = app.add_subcommand("pretrain-finetune",
                                  "action-free pretrain, then full finetune");
    CommonOpts pf_opts;
    add_config_opts(pf, pf_opts, true);
    std::string pf_pre_data, pf_fine_data, pf_out, pf_metrics;
    int pf_pre_steps = 0;
    pf->add_option("--pre-data", pf_pre_data, "action-free dataset path")->required();
    pf->add_option("--data", pf_fine_data, "full dataset path")->required();
    pf->add_option("--out", pf_out, "checkpoint output path")->required();
    pf->add_option("--metrics", pf_metrics, "JSON-lines metrics path");
    pf->add_option("--pre-steps", pf_pre_steps, "pretraining steps (default: train.steps)");

    // sample
    auto* sample_cmd = app.add_subcommand("sample", "one joint sample from a checkpoint");
    CommonOpts sample_opts;
    add_config_opts(sample_cmd, sample_opts, false);
    std::string sample_ckpt, sample_out;
    uint64_t sample_seed = 0;
    int sample_instruction = 0;
    std::vector<double> sample_pos = {0.0, 0.0};
    sample_cmd->add_option("--ckpt", sample_ckpt, "checkpoint path")->required();
    sample_cmd->add_option("--seed", sample_seed, "sampling seed");
    sample_cmd->add_option("--instruction", sample_instruction, "goal index");
    sample_cmd->add_option("--pos", sample_pos, "start position x y")->expected(2);
    sample_cmd->add_option("--out", sample_out, "output JSON path (default stdout)");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "closed-loop evaluation");
    CommonOpts eval_opts;
    add_config_opts(eval_cmd, eval_opts, false);
    std::string eval_ckpt, eval_out;
    int eval_episodes = 100;
    uint64_t eval_seed = 0;
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--episodes", eval_episodes, "episode count");
    eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
    eval_cmd->add_option("--out", eval_out, "output JSON path (default stdout)");

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "test-time step-count sweep");
    std::string sweep_ckpt, sweep_out, sweep_mode = "async";
    std::vector<int> sweep_n_o = {4, 8, 16};
    int sweep_n_a = 4;
    int sweep_episodes = 100;
    uint64_t sweep_seed = 0;
    sweep_cmd->add_option("--ckpt", sweep_ckpt, "checkpoint path")->required();
    sweep_cmd->add_option("--n-o", sweep_n_o, "vision step counts to sweep");
    sweep_cmd->add_option("--n-a", sweep_n_a, "fixed action step count (async)");
    sweep_cmd->add_option("--mode", sweep_mode, "async | sync")
        ->check(CLI::IsMember({"async", "sync"}));
    sweep_cmd->add_option("--episodes", sweep_episodes, "episode count per row");
    sweep_cmd->add_option("--seed", sweep_seed, "evaluation seed");
    sweep_cmd->add_option("--out", sweep_out, "output JSON path (default stdout)");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "architecture/noise ablation matrix");
    CommonOpts ablate_opts;
    add_config_opts(ablate_cmd, ablate_opts, true);
    std::string ablate_data, ablate_out;
    int ablate_episodes = 100;
    uint64_t ablate_eval_seed = 0;
    ablate_cmd->add_option("--data", ablate_data, "dataset path")->required();
    ablate_cmd->add_option("--episodes", ablate_episodes, "eval episodes per cell");
    ablate_cmd->add_option("--eval-seed", ablate_eval_seed, "evaluation seed");
    ablate_cmd->add_option("--out", ablate_out, "output JSON path (default stdout)");

    // gradcheck
    auto* grad_cmd = app.add_subcommand("gradcheck", "autodiff vs finite differences");
    uint64_t grad_seed = 0;
    int grad_seeds = 20;
    int grad_coords = 40;
    double grad_tol = 1e-4;
    grad_cmd->add_option("--seed", grad_seed, "base seed");
    grad_cmd->add_option("--seeds", grad_seeds, "number of seeds");
    grad_cmd->add_option("--coords", grad_coords, "coordinates probed per seed");
    grad_cmd->add_option("--tol", grad_tol, "max relative error allowed");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        dust::ExperimentConfig cfg = resolve_config(gen_opts);
        dust::SeededRng rng(gen_seed);
        dust::ToyDataset ds = dust::generate_dataset(
            rng, cfg.world, gen_episodes,
            gen_variant == "full" ? dust::DatasetVariant::Full : dust::DatasetVariant::ActionFree);
        dust::save_dataset(ds, gen_out);
        std::cout << "wrote " << ds.episodes.size() << " episodes to " << gen_out << "\n";
        return kExitOk;
    }

    if (export_json->parsed()) {
        nlohmann::json j = dust::dataset_to_json(dust::load_dataset(exp_in));
        if (exp_out.empty()) {
            std::cout << j.dump(2) << "\n";
        } else {
            open_out(exp_out) << j.dump(2) << "\n";
        }
        return kExitOk;
    }

    if (train_cmd->parsed()) {
        dust::ExperimentConfig cfg = resolve_config(train_opts);
        dust::ToyDataset ds = dust::load_dataset(train_data);
        std::ofstream metrics_os;
        dust::MetricsSink sink;
        if (!train_metrics.empty()) {
            metrics_os = open_out(train_metrics);
            sink = jsonl_sink(metrics_os);
        }
        std::optional<dust::DustModel> init;
        if (!train_init.empty()) {
            init = dust::load_checkpoint(train_init, cfg.model).model;
        }
        dust::TrainResult result = dust::train(cfg, ds, sink, std::move(init));
        if (result.aborted_non_finite) {
            std::cerr << "train: aborted on non-finite loss at step " << result.step << "\n";
            return kExitNumerical;
        }
        dust::save_checkpoint(dust::checkpoint_from_train(cfg, std::move(result)), train_out);
        std::cout << "wrote checkpoint " << train_out << "\n";
        return kExitOk;
    }

    if (pf->parsed()) {
        dust::ExperimentConfig fine_cfg = resolve_config(pf_opts);
        fine_cfg.loss.loss_mode = dust::LossMode::Full;
        dust::ExperimentConfig pre_cfg = fine_cfg;
        pre_cfg.loss.loss_mode = dust::LossMode::WmOnly;
        if (pf_pre_steps > 0) pre_cfg.train.steps = pf_pre_steps;
        dust::ToyDataset pre_ds = dust::load_dataset(pf_pre_data);
        dust::ToyDataset fine_ds = dust::load_dataset(pf_fine_data);
        std::ofstream metrics_os;
        dust::MetricsSink sink;
        if (!pf_metrics.empty()) {
            metrics_os = open_out(pf_metrics);
            sink = jsonl_sink(metrics_os);
        }
        dust::TrainResult result =
            dust::pretrain_then_finetune(pre_cfg, fine_cfg, pre_ds, fine_ds, sink);
        if (result.aborted_non_finite) {
            std::cerr << "pretrain-finetune: aborted on non-finite loss\n";
            return kExitNumerical;
        }
        dust::save_checkpoint(dust::checkpoint_from_train(fine_cfg, std::move(result)), pf_out);
        std::cout << "wrote checkpoint " << pf_out << "\n";
        return kExitOk;
    }

    if (sample_cmd->parsed()) {
        dust::Checkpoint ckpt = dust::load_checkpoint(sample_ckpt);
        dust::ExperimentConfig cfg = ckpt.config;
        for (const std::string& ov : sample_opts.overrides) {
            nlohmann::json j = dust::experiment_to_json(cfg);
            dust::apply_override(j, ov);
            cfg = dust::experiment_from_json(j);
        }
        dust::FeatureMap fm(cfg.world.feature_map_kind, cfg.world.m, cfg.world.d_o,
                            cfg.world.feature_seed, cfg.world.omega_max);
        dust::ContextMaker ctx_maker(cfg.world, fm);
        dust::ToyState state{{sample_pos[0], sample_pos[1]}, sample_instruction};
        dust::SeededRng rng(sample_seed);
        dust::SampleResult s =
            dust::sample_joint(ckpt.model, ctx_maker.make_context(state),
                               state.position.size() == 2
                                   ? dust::tensor({2}, {state.position[0], state.position[1]})
                                   : dust::zeros({2}),
                               rng, cfg.sampler);
        nlohmann::json j;
        j["action"] = tensor_to_json(s.action);
        j["future"] = tensor_to_json(s.future);
        nlohmann::json trace = nlohmann::json::array();
        for (const dust::TraceStep& st : s.trace.steps) {
            trace.push_back({{"step", st.global_step},
                             {"tau_a", st.tau_a},
                             {"tau_o", st.tau_o},
                             {"updated_action", st.updated_action}});
        }
        j["trace"] = std::move(trace);
        if (sample_out.empty()) {
            std::cout << j.dump(2) << "\n";
        } else {
            open_out(sample_out) << j.dump(2) << "\n";
        }
        return kExitOk;
    }

    if (eval_cmd->parsed()) {
        dust::Checkpoint ckpt = dust::load_checkpoint(eval_ckpt);
        dust::ExperimentConfig cfg = ckpt.config;
        for (const std::string& ov : eval_opts.overrides) {
            nlohmann::json j = dust::experiment_to_json(cfg);
            dust::apply_override(j, ov);
            cfg = dust::experiment_from_json(j);
        }
        dust::RolloutResult res =
            dust::evaluate(ckpt.model, cfg.world, cfg.sampler, eval_episodes, eval_seed);
        nlohmann::json j;
        j["success_rate"] = res.success_rate;
        j["wm_embedding_mse"] = res.wm_embedding_mse;
        j["episodes"] = eval_episodes;
        if (eval_out.empty()) {
            std::cout << j.dump(2) << "\n";
        } else {
            open_out(eval_out) << j.dump(2) << "\n";
        }
        return kExitOk;
    }

    if (sweep_cmd->parsed()) {
        dust::Checkpoint ckpt = dust::load_checkpoint(sweep_ckpt);
        const dust::SampleMode mode =
            sweep_mode == "async" ? dust::SampleMode::Async : dust::SampleMode::Sync;
        std::vector<dust::SweepRow> rows = dust::scaling_sweep(
            ckpt.model, ckpt.config.world, sweep_n_o, mode, sweep_n_a, sweep_episodes, sweep_seed);
        nlohmann::json j = nlohmann::json::array();
        for (const dust::SweepRow& r : rows) {
            j.push_back({{"n_o", r.n_o},
                         {"n_a", r.n_a},
                         {"success_rate", r.success_rate},
                         {"wm_embedding_mse", r.wm_embedding_mse}});
        }
        if (sweep_out.empty()) {
            std::cout << j.dump(2) << "\n";
        } else {
            open_out(sweep_out) << j.dump(2) << "\n";
        }
        return kExitOk;
    }

    if (ablate_cmd->parsed()) {
        dust::ExperimentConfig cfg = resolve_config(ablate_opts);
        dust::ToyDataset ds = dust::load_dataset(ablate_data);
        std::vector<dust::AblationCell> cells =
            dust::ablation_matrix(cfg, ds, ablate_episodes, ablate_eval_seed);
        nlohmann::json j = nlohmann::json::array();
        for (const dust::AblationCell& c : cells) {
            j.push_back({{"arch", c.arch == dust::ArchMode::Mmdit ? "mmdit" : "single_stream_dit"},
                         {"noise", c.noise == dust::NoiseMode::Decoupled ? "decoupled" : "joint"},
                         {"success_rate", c.success_rate},
                         {"final_loss_joint", c.final_loss_joint},
                         {"final_loss_action", c.final_loss_action},
                         {"final_loss_wm", c.final_loss_wm}});
        }
        if (ablate_out.empty()) {
            std::cout << j.dump(2) << "\n";
        } else {
            open_out(ablate_out) << j.dump(2) << "\n";
        }
        return kExitOk;
    }

    if (grad_cmd->parsed()) {
        const double err = dust::gradcheck_max_rel_err(grad_seed, grad_seeds, grad_coords);
        std::cout << "max relative error: " << err << " (tolerance " << grad_tol << ")\n";
        return err <= grad_tol ? kExitOk : kExitNumerical;
    }

    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        const std::string msg = e.what();
        std::cerr << "error: " << msg << "\n";
        return msg.find("non-finite") != std::string::npos ? kExitNumerical : kExitUsage;
    }
}
