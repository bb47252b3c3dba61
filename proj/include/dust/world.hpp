#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dust/rng.hpp"
#include "dust/tensor.hpp"

namespace dust {

enum class FeatureMapKind { IdentityPad, RandomFourier };
enum class DatasetVariant { Full, ActionFree };

using Vec2 = std::array<double, 2>;

// 2-D point-mass world on the clamped unit workspace [-1, 1]^2. Experts head
// straight for their instruction's goal at capped speed.
struct WorldConfig {
    std::vector<Vec2> goals = {{0.7, 0.0}, {0.0, 0.7}, {-0.7, 0.0}, {0.0, -0.7}};
    int k = 4;
    int horizon = 32;
    double expert_noise = 0.01;
    double success_radius = 0.1;
    double v_max = 0.25;
    FeatureMapKind feature_map_kind = FeatureMapKind::RandomFourier;
    uint64_t feature_seed = 1234;
    int d_o = 8;
    int m = 4;
    double omega_max = 2.0;  // frequency norm cap of the random Fourier map
    int d_model = 16;        // width the frozen context maps project to

    void validate() const {
        if (goals.empty()) throw std::runtime_error("WorldConfig: needs at least one goal");
        for (const Vec2& g : goals) {
            if (std::abs(g[0]) > 1.0 || std::abs(g[1]) > 1.0) {
                throw std::runtime_error("WorldConfig: goal outside the unit workspace");
            }
        }
        if (success_radius <= 0.0) throw std::runtime_error("WorldConfig: success_radius must be > 0");
        if (k < 1 || horizon < 1 || d_o < 1 || m < 1) {
            throw std::runtime_error("WorldConfig: counts must be >= 1");
        }
    }
};

struct ToyState {
    Vec2 position{0.0, 0.0};
    int instruction = 0;
};

inline Vec2 clamp_position(Vec2 p) {
    return {std::clamp(p[0], -1.0, 1.0), std::clamp(p[1], -1.0, 1.0)};
}

inline Vec2 dynamics_step(const Vec2& pos, const Vec2& action) {
    return clamp_position({pos[0] + action[0], pos[1] + action[1]});
}

// Frozen embedding surrogate for the pretrained vision encoder. Parameters
// are drawn once from feature_seed and never trained.
class FeatureMap {
  public:
    FeatureMap(FeatureMapKind kind, int m, int d_o, uint64_t feature_seed, double omega_max)
        : kind_(kind), m_(m), d_o_(d_o) {
        if (kind_ == FeatureMapKind::RandomFourier) {
            SeededRng rng(feature_seed);
            const int n = m_ * d_o_;
            omegas_.resize(n);
            phases_.resize(n);
            // Components uniform in [-omega_max/sqrt(2), omega_max/sqrt(2)],
            // so |omega|_2 <= omega_max holds for every frequency pair.
            const double half = omega_max / std::sqrt(2.0);
            for (int i = 0; i < n; ++i) {
                omegas_[i] = {(2.0 * rng.uniform() - 1.0) * half,
                              (2.0 * rng.uniform() - 1.0) * half};
                phases_[i] = 2.0 * kPi * rng.uniform();
            }
        }
    }

    // identity_pad: position in the first two coords of token 0, rest zero.
    // random_fourier: token j, coord c = cos(<omega_jc, pos> + phi_jc).
    Tensor embed(const Vec2& pos) const {
        Tensor out = zeros({m_, d_o_});
        if (kind_ == FeatureMapKind::IdentityPad) {
            if (d_o_ < 2) throw std::runtime_error("FeatureMap: identity_pad needs d_o >= 2");
            out.ptr()[0] = pos[0];
            out.ptr()[1] = pos[1];
        } else {
            for (int i = 0; i < m_ * d_o_; ++i) {
                out.ptr()[i] =
                    std::cos(omegas_[i][0] * pos[0] + omegas_[i][1] * pos[1] + phases_[i]);
            }
        }
        return out;
    }

    int m() const { return m_; }
    int d_o() const { return d_o_; }

  private:
    static constexpr double kPi = 3.14159265358979323846;
    FeatureMapKind kind_;
    int m_;
    int d_o_;
    std::vector<Vec2> omegas_;
    std::vector<double> phases_;
};

// Frozen surrogate for the vision-language backbone: two context tokens, a
// state summary and a per-instruction code, projected to d_model by maps
// drawn once from feature_seed (offsets 500 and 1000 + id).
class ContextMaker {
  public:
    ContextMaker(const WorldConfig& world, const FeatureMap& fm) : world_(world), fm_(&fm) {
        SeededRng rng(world.feature_seed + 500);
        state_proj_ = zeros({world.d_o, world.d_model});
        for (double& v : *state_proj_.data) v = rng.normal() / std::sqrt(world.d_o);
        for (size_t id = 0; id < world.goals.size(); ++id) {
            SeededRng code_rng(world.feature_seed + 1000 + id);
            instruction_codes_.push_back(gaussian_sample(code_rng, {1, world.d_model}));
        }
    }

    Tensor make_context(const ToyState& state) const {
        if (state.instruction < 0 ||
            state.instruction >= static_cast<int>(instruction_codes_.size())) {
            throw std::runtime_error("make_context: unknown instruction id " +
                                     std::to_string(state.instruction));
        }
        Tensor emb = fm_->embed(state.position);  // (m, d_o)
        Tensor summary = zeros({1, world_.d_o});
        for (int j = 0; j < world_.d_o; ++j) {
            double s = 0.0;
            for (int i = 0; i < world_.m; ++i) s += emb.ptr()[i * world_.d_o + j];
            summary.ptr()[j] = s / world_.m;
        }
        Tensor token0 = matmul(summary, state_proj_);
        return concat({token0, instruction_codes_[state.instruction]}, 0);
    }

  private:
    WorldConfig world_;
    const FeatureMap* fm_;
    Tensor state_proj_;
    std::vector<Tensor> instruction_codes_;
};

struct ToyEpisode {
    int instruction = 0;
    std::vector<Vec2> states;   // horizon + 1 positions
    std::vector<Vec2> actions;  // horizon per-step displacements; empty if action-free
    bool has_actions = true;

    int length() const { return static_cast<int>(states.size()) - 1; }

    // A_t: k consecutive per-step displacements, zero-padded past the end.
    Tensor action_chunk(int t, int k) const {
        if (!has_actions) throw std::runtime_error("ToyEpisode: action-free episode has no chunks");
        Tensor out = zeros({k, 2});
        for (int i = 0; i < k; ++i) {
            const int idx = t + i;
            if (idx < static_cast<int>(actions.size())) {
                out.ptr()[i * 2] = actions[idx][0];
                out.ptr()[i * 2 + 1] = actions[idx][1];
            }
        }
        return out;
    }

    // Future target: embedding of the state k steps ahead, clamped to L.
    Tensor future_embedding(int t, int k, const FeatureMap& fm) const {
        const int idx = std::min(t + k, length());
        return fm.embed(states[idx]);
    }

    Tensor state_tensor(int t) const { return tensor({2}, {states[t][0], states[t][1]}); }
};

struct ToyDataset {
    WorldConfig world;
    DatasetVariant variant = DatasetVariant::Full;
    std::vector<ToyEpisode> episodes;
};

inline Vec2 expert_action(const Vec2& pos, const Vec2& goal, double v_max, double noise_std,
                          SeededRng& rng) {
    Vec2 delta{goal[0] - pos[0], goal[1] - pos[1]};
    const double dist = std::hypot(delta[0], delta[1]);
    Vec2 a = delta;
    if (dist > v_max) {
        a[0] = v_max * delta[0] / dist;
        a[1] = v_max * delta[1] / dist;
    }
    if (noise_std > 0.0) {
        a[0] += noise_std * rng.normal();
        a[1] += noise_std * rng.normal();
    }
    return a;
}

inline ToyEpisode generate_episode(SeededRng& rng, const WorldConfig& world, int instruction) {
    ToyEpisode ep;
    ep.instruction = instruction;
    Vec2 pos{1.6 * rng.uniform() - 0.8, 1.6 * rng.uniform() - 0.8};
    ep.states.push_back(pos);
    const Vec2& goal = world.goals[instruction];
    for (int t = 0; t < world.horizon; ++t) {
        const Vec2 a = expert_action(pos, goal, world.v_max, world.expert_noise, rng);
        ep.actions.push_back(a);
        pos = dynamics_step(pos, a);
        ep.states.push_back(pos);
    }
    return ep;
}

inline ToyDataset generate_dataset(SeededRng& rng, const WorldConfig& world, int n_episodes,
                                   DatasetVariant variant) {
    world.validate();
    if (n_episodes < 1) throw std::runtime_error("generate_dataset: n_episodes must be >= 1");
    ToyDataset ds;
    ds.world = world;
    ds.variant = variant;
    ds.episodes.reserve(n_episodes);
    for (int i = 0; i < n_episodes; ++i) {
        const int instruction =
            static_cast<int>(rng.next_u64() % static_cast<uint64_t>(world.goals.size()));
        ToyEpisode ep = generate_episode(rng, world, instruction);
        if (variant == DatasetVariant::ActionFree) {
            ep.actions.clear();
            ep.has_actions = false;
        }
        ds.episodes.push_back(std::move(ep));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Closed-loop evaluation
// ---------------------------------------------------------------------------

struct PolicyOutput {
    Tensor action;                 // (k, 2)
    std::optional<Tensor> future;  // (m, d_o) sampled future embedding
};

using Policy = std::function<PolicyOutput(const Tensor& ctx, const ToyState& state)>;

struct EpisodeLog {
    int instruction = 0;
    bool success = false;
    double final_distance = 0.0;
    double wm_embedding_mse = 0.0;
    int wm_samples = 0;
    bool aborted_non_finite = false;
};

struct RolloutResult {
    double success_rate = 0.0;
    double wm_embedding_mse = 0.0;  // mean over all replans with a future sample
    std::vector<EpisodeLog> episodes;
};

// One closed-loop episode: execute every action of each predicted chunk,
// re-plan, stop at the horizon. Success iff the final position is within
// success_radius of the goal. A non-finite action fails the episode instead
// of propagating. wm_embedding_mse stays a per-replan sum here; callers
// normalize by wm_samples.
inline EpisodeLog rollout_episode(const Policy& policy, const WorldConfig& world,
                                  const FeatureMap& fm, const ContextMaker& ctx_maker,
                                  SeededRng& rng) {
    EpisodeLog log;
    log.instruction = static_cast<int>(rng.next_u64() % world.goals.size());
    ToyState state{{1.6 * rng.uniform() - 0.8, 1.6 * rng.uniform() - 0.8}, log.instruction};
    const Vec2& goal = world.goals[log.instruction];
    int t = 0;
    while (t < world.horizon) {
        PolicyOutput out;
        try {
            out = policy(ctx_maker.make_context(state), state);
        } catch (const std::exception&) {
            log.aborted_non_finite = true;
            break;
        }
        bool finite = true;
        for (double v : *out.action.data) finite = finite && std::isfinite(v);
        if (!finite) {
            log.aborted_non_finite = true;
            break;
        }
        for (int i = 0; i < world.k && t < world.horizon; ++i, ++t) {
            state.position = dynamics_step(
                state.position, {out.action.ptr()[i * 2], out.action.ptr()[i * 2 + 1]});
        }
        if (out.future) {
            Tensor target = fm.embed(state.position);
            double s = 0.0;
            for (int i = 0; i < target.numel(); ++i) {
                const double d = out.future->ptr()[i] - target.ptr()[i];
                s += d * d;
            }
            log.wm_embedding_mse += s / target.numel();
            log.wm_samples += 1;
        }
    }
    log.final_distance = std::hypot(state.position[0] - goal[0], state.position[1] - goal[1]);
    log.success = !log.aborted_non_finite && log.final_distance <= world.success_radius;
    return log;
}

inline RolloutResult aggregate_episodes(std::vector<EpisodeLog> logs) {
    RolloutResult result;
    int successes = 0;
    double wm_sum = 0.0;
    int wm_count = 0;
    for (EpisodeLog& log : logs) {
        if (log.success) ++successes;
        if (log.wm_samples > 0) {
            wm_sum += log.wm_embedding_mse;
            wm_count += log.wm_samples;
            log.wm_embedding_mse /= log.wm_samples;
        }
    }
    result.success_rate = logs.empty() ? 0.0 : static_cast<double>(successes) / logs.size();
    result.wm_embedding_mse = wm_count > 0 ? wm_sum / wm_count : 0.0;
    result.episodes = std::move(logs);
    return result;
}

inline RolloutResult rollout(const Policy& policy, const WorldConfig& world, SeededRng& rng,
                             int n_episodes) {
    world.validate();
    FeatureMap fm(world.feature_map_kind, world.m, world.d_o, world.feature_seed, world.omega_max);
    ContextMaker ctx_maker(world, fm);
    std::vector<EpisodeLog> logs;
    logs.reserve(n_episodes);
    for (int e = 0; e < n_episodes; ++e) {
        logs.push_back(rollout_episode(policy, world, fm, ctx_maker, rng));
    }
    return aggregate_episodes(std::move(logs));
}

// ---------------------------------------------------------------------------
// World config JSON and the DSTD dataset file format
// ---------------------------------------------------------------------------

inline nlohmann::json world_to_json(const WorldConfig& w) {
    nlohmann::json j;
    j["goals"] = w.goals;
    j["k"] = w.k;
    j["horizon"] = w.horizon;
    j["expert_noise"] = w.expert_noise;
    j["success_radius"] = w.success_radius;
    j["v_max"] = w.v_max;
    j["feature_map_kind"] =
        w.feature_map_kind == FeatureMapKind::IdentityPad ? "identity_pad" : "random_fourier";
    j["feature_seed"] = w.feature_seed;
    j["d_o"] = w.d_o;
    j["m"] = w.m;
    j["omega_max"] = w.omega_max;
    j["d_model"] = w.d_model;
    return j;
}

inline WorldConfig world_from_json(const nlohmann::json& j) {
    WorldConfig w;
    static const std::vector<std::string> known = {
        "goals", "k", "horizon", "expert_noise", "success_radius", "v_max",
        "feature_map_kind", "feature_seed", "d_o", "m", "omega_max", "d_model"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw std::runtime_error("world config: unknown key '" + it.key() + "'");
        }
    }
    if (j.contains("goals")) w.goals = j["goals"].get<std::vector<Vec2>>();
    if (j.contains("k")) w.k = j["k"];
    if (j.contains("horizon")) w.horizon = j["horizon"];
    if (j.contains("expert_noise")) w.expert_noise = j["expert_noise"];
    if (j.contains("success_radius")) w.success_radius = j["success_radius"];
    if (j.contains("v_max")) w.v_max = j["v_max"];
    if (j.contains("feature_map_kind")) {
        const std::string kind = j["feature_map_kind"];
        if (kind == "identity_pad") {
            w.feature_map_kind = FeatureMapKind::IdentityPad;
        } else if (kind == "random_fourier") {
            w.feature_map_kind = FeatureMapKind::RandomFourier;
        } else {
            throw std::runtime_error("world config: unknown feature_map_kind '" + kind + "'");
        }
    }
    if (j.contains("feature_seed")) w.feature_seed = j["feature_seed"];
    if (j.contains("d_o")) w.d_o = j["d_o"];
    if (j.contains("m")) w.m = j["m"];
    if (j.contains("omega_max")) w.omega_max = j["omega_max"];
    if (j.contains("d_model")) w.d_model = j["d_model"];
    return w;
}

namespace io {

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline double read_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

}  // namespace io

inline constexpr uint32_t kDatasetVersion = 1;

// Binary layout (little-endian): "DSTD", u32 version, u64 json length +
// canonical JSON world config, u8 variant, u64 episode count, then per
// episode a u64 byte length followed by the record.
inline void save_dataset(const ToyDataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
    os.write("DSTD", 4);
    io::write_u32(os, kDatasetVersion);
    const std::string cfg = world_to_json(ds.world).dump();
    io::write_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    os.put(ds.variant == DatasetVariant::Full ? 0 : 1);
    io::write_u64(os, ds.episodes.size());
    for (const ToyEpisode& ep : ds.episodes) {
        const uint64_t n_states = ep.states.size();
        const uint64_t n_actions = ep.actions.size();
        const uint64_t bytes = 4 + 8 + n_states * 16 + 8 + n_actions * 16;
        io::write_u64(os, bytes);
        io::write_u32(os, static_cast<uint32_t>(ep.instruction));
        io::write_u64(os, n_states);
        for (const Vec2& s : ep.states) {
            io::write_f64(os, s[0]);
            io::write_f64(os, s[1]);
        }
        io::write_u64(os, n_actions);
        for (const Vec2& a : ep.actions) {
            io::write_f64(os, a[0]);
            io::write_f64(os, a[1]);
        }
    }
    if (!os) throw std::runtime_error("save_dataset: write failed for " + path);
}

inline ToyDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DSTD", 4) != 0) {
        throw std::runtime_error("load_dataset: bad magic in " + path);
    }
    const uint32_t version = io::read_u32(is);
    if (version != kDatasetVersion) {
        throw std::runtime_error("load_dataset: unsupported version " + std::to_string(version));
    }
    const uint64_t cfg_len = io::read_u64(is);
    std::string cfg(cfg_len, '\0');
    is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
    ToyDataset ds;
    ds.world = world_from_json(nlohmann::json::parse(cfg));
    ds.variant = is.get() == 0 ? DatasetVariant::Full : DatasetVariant::ActionFree;
    const uint64_t n_eps = io::read_u64(is);
    for (uint64_t e = 0; e < n_eps; ++e) {
        io::read_u64(is);  // record length, informational
        ToyEpisode ep;
        ep.instruction = static_cast<int>(io::read_u32(is));
        const uint64_t n_states = io::read_u64(is);
        for (uint64_t i = 0; i < n_states; ++i) {
            ep.states.push_back({io::read_f64(is), io::read_f64(is)});
        }
        const uint64_t n_actions = io::read_u64(is);
        for (uint64_t i = 0; i < n_actions; ++i) {
            ep.actions.push_back({io::read_f64(is), io::read_f64(is)});
        }
        ep.has_actions = n_actions > 0;
        ds.episodes.push_back(std::move(ep));
    }
    if (!is) throw std::runtime_error("load_dataset: truncated file " + path);
    return ds;
}

// Human-readable mirror of a dataset file.
inline nlohmann::json dataset_to_json(const ToyDataset& ds) {
    nlohmann::json j;
    j["world"] = world_to_json(ds.world);
    j["variant"] = ds.variant == DatasetVariant::Full ? "full" : "action_free";
    nlohmann::json eps = nlohmann::json::array();
    for (const ToyEpisode& ep : ds.episodes) {
        nlohmann::json je;
        je["instruction"] = ep.instruction;
        je["states"] = ep.states;
        if (ep.has_actions) je["actions"] = ep.actions;
        eps.push_back(std::move(je));
    }
    j["episodes"] = std::move(eps);
    return j;
}

}  // namespace dust
