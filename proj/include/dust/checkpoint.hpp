#pragma once

#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dust/config.hpp"
#include "dust/train.hpp"

namespace dust {

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ExperimentConfig config;
    DustModel model;
    AdamState opt;
    SeededRng rng{0};
    uint64_t step = 0;
};

// Binary layout (little-endian): "DUST", u32 version, u64 length + canonical
// JSON of all configs, u32 param count, then per parameter name / dims /
// raw f64 data, optimizer moments in parameter order, the step counter, and
// the RNG seed + state words. save -> load -> save is byte-identical.
inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("DUST", 4);
    io::write_u32(os, kCheckpointVersion);
    const std::string cfg = experiment_to_json(ckpt.config).dump();
    io::write_u64(os, cfg.size());
    os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    io::write_u32(os, static_cast<uint32_t>(ckpt.model.params.size()));
    for (const auto& [name, p] : ckpt.model.params.items()) {
        io::write_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::write_u32(os, static_cast<uint32_t>(p.shape.size()));
        for (int e : p.shape) io::write_u32(os, static_cast<uint32_t>(e));
        for (double v : *p.data) io::write_f64(os, v);
    }

    os.put(ckpt.opt.initialized() ? 1 : 0);
    if (ckpt.opt.initialized()) {
        io::write_u64(os, ckpt.opt.t);
        for (const auto& m : ckpt.opt.m)
            for (double v : m) io::write_f64(os, v);
        for (const auto& v : ckpt.opt.v)
            for (double x : v) io::write_f64(os, x);
    }

    io::write_u64(os, ckpt.step);
    io::write_u64(os, ckpt.rng.seed());
    for (uint64_t w : ckpt.rng.state()) io::write_u64(os, w);
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path,
                                  std::optional<ModelConfig> expected = std::nullopt) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DUST", 4) != 0) {
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    }
    const uint32_t version = io::read_u32(is);
    if (version != kCheckpointVersion) {
        throw std::runtime_error("load_checkpoint: unsupported version " +
                                 std::to_string(version));
    }
    const uint64_t cfg_len = io::read_u64(is);
    std::string cfg(cfg_len, '\0');
    is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));

    Checkpoint ckpt;
    ckpt.config = experiment_from_json(nlohmann::json::parse(cfg));
    if (expected && !ckpt.config.model.same_topology(*expected)) {
        throw std::runtime_error(
            "load_checkpoint: model config mismatch between checkpoint and expectation: " +
            model_to_json(ckpt.config.model).dump() + " vs " + model_to_json(*expected).dump());
    }
    ckpt.model.cfg = ckpt.config.model;

    const uint32_t n_params = io::read_u32(is);
    for (uint32_t i = 0; i < n_params; ++i) {
        const uint32_t name_len = io::read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t ndim = io::read_u32(is);
        std::vector<int> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(io::read_u32(is));
        Tensor t = zeros(shape);
        for (int e = 0; e < t.numel(); ++e) t.ptr()[e] = io::read_f64(is);
        ckpt.model.params.add(name, std::move(t));
    }

    if (is.get() == 1) {
        ckpt.opt.t = io::read_u64(is);
        for (const auto& [name, p] : ckpt.model.params.items()) {
            std::vector<double> m(p.numel());
            for (double& v : m) v = io::read_f64(is);
            ckpt.opt.m.push_back(std::move(m));
        }
        for (const auto& [name, p] : ckpt.model.params.items()) {
            std::vector<double> v(p.numel());
            for (double& x : v) x = io::read_f64(is);
            ckpt.opt.v.push_back(std::move(v));
        }
    }

    ckpt.step = io::read_u64(is);
    const uint64_t seed = io::read_u64(is);
    ckpt.rng = SeededRng(seed);
    std::array<uint64_t, 4> state{};
    for (uint64_t& w : state) w = io::read_u64(is);
    ckpt.rng.set_state(state);
    if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return ckpt;
}

inline Checkpoint checkpoint_from_train(const ExperimentConfig& cfg, TrainResult result) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.model = std::move(result.model);
    ckpt.opt = std::move(result.opt);
    ckpt.rng = result.rng;
    ckpt.step = static_cast<uint64_t>(result.step);
    return ckpt;
}

}  // namespace dust
