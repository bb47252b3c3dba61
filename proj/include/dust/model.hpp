#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dust/rng.hpp"
#include "dust/tensor.hpp"

namespace dust {

enum class ArchMode { Mmdit, SingleStreamDit };
enum class AdalnMode { PerModality, Global };

struct ModelConfig {
    int d_model = 16;
    int n_heads = 2;
    int n_mmdit = 4;   // shared dual-stream blocks
    int n_dit = 2;     // per-stream tail blocks
    int k = 4;         // action chunk length
    int m = 4;         // future-embedding token count (perfect square)
    int d_a = 2;
    int d_o = 8;
    int d_s = 2;
    int t_hidden = 16;  // timestep-embedding MLP width
    int d_mlp = 64;
    ArchMode arch_mode = ArchMode::Mmdit;
    AdalnMode adaln_mode = AdalnMode::PerModality;
    bool interleave_cross = true;  // odd layers cross-attend to context

    void validate() const {
        if (d_model % n_heads != 0) throw std::runtime_error("ModelConfig: d_model % n_heads != 0");
        if (d_model < 1 || n_heads < 1 || n_mmdit < 1 || n_dit < 1 || k < 1 || m < 1 || d_a < 1 ||
            d_o < 1 || d_s < 1 || t_hidden < 1 || d_mlp < 1) {
            throw std::runtime_error("ModelConfig: all counts must be >= 1");
        }
        const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(m))));
        if (r * r != m) {
            throw std::runtime_error("ModelConfig: m = " + std::to_string(m) +
                                     " is not a perfect square (2-D position grid undefined)");
        }
    }

    bool same_topology(const ModelConfig& o) const {
        return d_model == o.d_model && n_heads == o.n_heads && n_mmdit == o.n_mmdit &&
               n_dit == o.n_dit && k == o.k && m == o.m && d_a == o.d_a && d_o == o.d_o &&
               d_s == o.d_s && t_hidden == o.t_hidden && d_mlp == o.d_mlp &&
               arch_mode == o.arch_mode;
    }
};

// Named parameter set with a stable order; the order is the serialization
// and optimizer-state contract.
class ParamStore {
  public:
    void add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw std::runtime_error("ParamStore: duplicate " + name);
        index_[name] = static_cast<int>(items_.size());
        items_.emplace_back(name, std::move(t));
    }
    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("ParamStore: missing " + name);
        return items_[it->second].second;
    }
    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("ParamStore: missing " + name);
        return items_[it->second].second;
    }
    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("ParamStore: missing " + name);
        return it->second;
    }
    size_t size() const { return items_.size(); }
    std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

    int total_scalars() const {
        int n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, int> index_;
};

// Store parameters optionally attached to a tape, aligned with store order.
class BoundParams {
  public:
    BoundParams(const ParamStore& store, Tape* tape) : store_(&store) {
        tensors_.reserve(store.size());
        for (const auto& [name, t] : store.items()) {
            tensors_.push_back(tape ? tape->watch(t, /*param=*/true) : t);
        }
    }
    const Tensor& get(const std::string& name) const { return tensors_[store_->index_of(name)]; }
    const std::vector<Tensor>& all() const { return tensors_; }
    const ParamStore& store() const { return *store_; }

  private:
    const ParamStore* store_;
    std::vector<Tensor> tensors_;
};

namespace pe {

// 1-D sinusoidal codes: pe[p, 2i] = sin(p / 10000^(2i/d)), cos for odd.
inline Tensor sinusoidal_1d(int n, int d) {
    Tensor out = zeros({n, d});
    for (int p = 0; p < n; ++p) {
        for (int i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -2.0 * (i / 2) / d);
            out.ptr()[p * d + i] =
                (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
        }
    }
    return out;
}

// 2-D codes over a rows x cols grid: first d/2 dims encode the row index,
// last d/2 the column index.
inline Tensor sinusoidal_2d(int rows, int cols, int d) {
    const int half = d / 2;
    Tensor row_pe = sinusoidal_1d(rows, half);
    Tensor col_pe = sinusoidal_1d(cols, d - half);
    Tensor out = zeros({rows * cols, d});
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            double* po = out.ptr() + (r * cols + c) * d;
            std::copy(row_pe.ptr() + r * half, row_pe.ptr() + (r + 1) * half, po);
            std::copy(col_pe.ptr() + c * (d - half), col_pe.ptr() + (c + 1) * (d - half),
                      po + half);
        }
    }
    return out;
}

// Sinusoidal features of a continuous timestep tau in [0, 1].
inline Tensor timestep_features(double tau, int d) {
    const int half = d / 2;
    Tensor out = zeros({1, d});
    for (int i = 0; i < half; ++i) {
        const double arg = tau * std::pow(10000.0, static_cast<double>(i) / half);
        out.ptr()[i] = std::sin(arg);
        out.ptr()[half + i] = std::cos(arg);
    }
    return out;
}

}  // namespace pe

struct DustModel {
    ModelConfig cfg;
    ParamStore params;

    static DustModel build(const ModelConfig& cfg, uint64_t seed);
};

namespace model_detail {

inline Tensor init_linear(SeededRng& rng, int fan_in, int fan_out) {
    Tensor w = zeros({fan_in, fan_out});
    const double std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : *w.data) v = rng.normal() * std_dev;
    return w;
}

inline void add_linear(ParamStore& p, SeededRng& rng, const std::string& prefix, int fan_in,
                       int fan_out, bool zero_init = false) {
    p.add(prefix + ".W", zero_init ? zeros({fan_in, fan_out}) : init_linear(rng, fan_in, fan_out));
    p.add(prefix + ".b", zeros({fan_out}));
}

inline void add_block(ParamStore& p, SeededRng& rng, const std::string& prefix,
                      const ModelConfig& c) {
    add_linear(p, rng, prefix + ".mod", c.d_model, 6 * c.d_model, /*zero_init=*/true);
    add_linear(p, rng, prefix + ".attn.q", c.d_model, c.d_model);
    add_linear(p, rng, prefix + ".attn.k", c.d_model, c.d_model);
    add_linear(p, rng, prefix + ".attn.v", c.d_model, c.d_model);
    add_linear(p, rng, prefix + ".attn.o", c.d_model, c.d_model);
    add_linear(p, rng, prefix + ".mlp.1", c.d_model, c.d_mlp);
    add_linear(p, rng, prefix + ".mlp.2", c.d_mlp, c.d_model);
}

}  // namespace model_detail

inline DustModel DustModel::build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    DustModel model;
    model.cfg = cfg;
    SeededRng rng(seed);
    ParamStore& p = model.params;
    using model_detail::add_block;
    using model_detail::add_linear;

    add_linear(p, rng, "temb.1", cfg.d_model, cfg.t_hidden);
    add_linear(p, rng, "temb.2", cfg.t_hidden, cfg.d_model);

    add_linear(p, rng, "enc.state", cfg.d_s, cfg.d_model);
    add_linear(p, rng, "enc.action", cfg.d_a, cfg.d_model);
    add_linear(p, rng, "enc.vision.1", cfg.d_o, cfg.d_model);
    add_linear(p, rng, "enc.vision.2", cfg.d_model, cfg.d_model);
    add_linear(p, rng, "enc.vision.3", cfg.d_model, cfg.d_model);

    if (cfg.arch_mode == ArchMode::Mmdit) {
        for (int i = 0; i < cfg.n_mmdit; ++i) {
            add_block(p, rng, "mmdit." + std::to_string(i) + ".a", cfg);
            add_block(p, rng, "mmdit." + std::to_string(i) + ".o", cfg);
        }
        for (int j = 0; j < cfg.n_dit; ++j) {
            add_block(p, rng, "dit." + std::to_string(j) + ".a", cfg);
            add_block(p, rng, "dit." + std::to_string(j) + ".o", cfg);
        }
    } else {
        for (int i = 0; i < cfg.n_mmdit + cfg.n_dit; ++i) {
            add_block(p, rng, "ss." + std::to_string(i), cfg);
        }
    }

    add_linear(p, rng, "dec.action", cfg.d_model, cfg.d_a, /*zero_init=*/true);
    add_linear(p, rng, "dec.vision.1", cfg.d_model, cfg.d_model);
    add_linear(p, rng, "dec.vision.2", cfg.d_model, cfg.d_o, /*zero_init=*/true);
    return model;
}

// Closed-form parameter scalar count; asserted against the built store.
inline int expected_param_count(const ModelConfig& c) {
    auto linear = [](int in, int out) { return in * out + out; };
    const int block = linear(c.d_model, 6 * c.d_model) + 4 * linear(c.d_model, c.d_model) +
                      linear(c.d_model, c.d_mlp) + linear(c.d_mlp, c.d_model);
    int n = linear(c.d_model, c.t_hidden) + linear(c.t_hidden, c.d_model);
    n += linear(c.d_s, c.d_model) + linear(c.d_a, c.d_model);
    n += linear(c.d_o, c.d_model) + 2 * linear(c.d_model, c.d_model);
    n += (c.arch_mode == ArchMode::Mmdit) ? 2 * (c.n_mmdit + c.n_dit) * block
                                          : (c.n_mmdit + c.n_dit) * block;
    n += linear(c.d_model, c.d_a);
    n += linear(c.d_model, c.d_model) + linear(c.d_model, c.d_o);
    return n;
}

struct ForwardOptions {
    // Test hook: restrict the joint attention to within-stream terms, making
    // the streams fully independent on self-attention layers.
    bool mask_cross_modal = false;
};

struct ForwardResult {
    Tensor pred_a;  // (k, d_a)
    Tensor pred_o;  // (m, d_o)
};

namespace model_detail {

inline Tensor linear(const BoundParams& bp, const std::string& prefix, const Tensor& x) {
    return add(matmul(x, bp.get(prefix + ".W")), bp.get(prefix + ".b"));
}

// Sinusoidal features of tau through the shared 2-layer MLP -> (1, d_model).
inline Tensor timestep_embedding(const BoundParams& bp, const ModelConfig& c, double tau) {
    Tensor feat = pe::timestep_features(tau, c.d_model);
    return linear(bp, "temb.2", silu(linear(bp, "temb.1", feat)));
}

struct Modulation {
    Tensor shift_attn, scale_attn, gate_attn;
    Tensor shift_mlp, scale_mlp, gate_mlp;
};

inline Modulation modulation(const BoundParams& bp, const std::string& prefix, const Tensor& emb,
                             int d) {
    Tensor mod = linear(bp, prefix + ".mod", silu(emb));  // (1, 6d)
    std::vector<Tensor> parts = split(mod, 1, {d, d, d, d, d, d});
    Modulation m;
    m.shift_attn = reshape(parts[0], {d});
    m.scale_attn = reshape(parts[1], {d});
    m.gate_attn = reshape(parts[2], {d});
    m.shift_mlp = reshape(parts[3], {d});
    m.scale_mlp = reshape(parts[4], {d});
    m.gate_mlp = reshape(parts[5], {d});
    return m;
}

inline Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& sc) {
    static thread_local std::unordered_map<int, Tensor> ones_cache;
    auto it = ones_cache.find(sc.shape[0]);
    if (it == ones_cache.end()) {
        it = ones_cache.emplace(sc.shape[0], full({sc.shape[0]}, 1.0)).first;
    }
    return add(mul(layer_norm(x), add(sc, it->second)), shift);
}

// Multi-head scaled dot-product attention core on already-projected q/k/v.
inline Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads) {
    const int d = q.shape[1];
    const int dh = d / n_heads;
    std::vector<int> head_sizes(n_heads, dh);
    std::vector<Tensor> qs = split(q, 1, head_sizes);
    std::vector<Tensor> ks = split(k, 1, head_sizes);
    std::vector<Tensor> vs = split(v, 1, head_sizes);
    std::vector<Tensor> outs;
    outs.reserve(n_heads);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < n_heads; ++h) {
        Tensor att = softmax(scale(matmul(qs[h], transpose(ks[h])), inv_sqrt));
        outs.push_back(matmul(att, vs[h]));
    }
    return concat(outs, 1);
}

struct Qkv {
    Tensor q, k, v;
};

inline Qkv project_qkv(const BoundParams& bp, const std::string& prefix, const Tensor& q_src,
                       const Tensor& kv_src) {
    return {linear(bp, prefix + ".attn.q", q_src), linear(bp, prefix + ".attn.k", kv_src),
            linear(bp, prefix + ".attn.v", kv_src)};
}

inline Tensor gated_residual(const Tensor& x, const Tensor& delta, const Tensor& gate) {
    return add(x, mul(delta, gate));
}

inline Tensor mlp(const BoundParams& bp, const std::string& prefix, const Tensor& x) {
    return linear(bp, prefix + ".mlp.2", silu(linear(bp, prefix + ".mlp.1", x)));
}

}  // namespace model_detail

struct StreamState {
    Tensor action_tokens;  // (1 + k, d_model), state token prepended
    Tensor vision_tokens;  // (m, d_model)
};

// Encoders: action stream is a linear projection of [state; action rows] plus
// 1-D sinusoidal position codes; vision stream is a 3-layer SiLU MLP plus 2-D
// codes over a sqrt(m) x sqrt(m) grid.
inline StreamState encode_inputs(const BoundParams& bp, const ModelConfig& c, const Tensor& state,
                                 const Tensor& noisy_action, const Tensor& noisy_future) {
    using namespace model_detail;
    if (static_cast<int>(state.numel()) != c.d_s) {
        throw std::runtime_error("encode_inputs: state shape " + shape_str(state.shape) +
                                 " != (" + std::to_string(c.d_s) + ")");
    }
    Tensor state_row = reshape(state, {1, c.d_s});
    Tensor state_tok = linear(bp, "enc.state", state_row);
    Tensor act_toks = linear(bp, "enc.action", noisy_action);
    Tensor action_stream = add(concat({state_tok, act_toks}, 0), pe::sinusoidal_1d(1 + c.k, c.d_model));

    Tensor h = silu(linear(bp, "enc.vision.1", noisy_future));
    h = silu(linear(bp, "enc.vision.2", h));
    h = linear(bp, "enc.vision.3", h);
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(c.m))));
    Tensor vision_stream = add(h, pe::sinusoidal_2d(grid, grid, c.d_model));
    return {action_stream, vision_stream};
}

// One dual-stream block: per-stream AdaLN modulation from that stream's
// timestep embedding, joint attention over the concatenated token set on even
// layers, per-stream cross-attention to the context on odd layers, then a
// per-stream gated MLP.
inline StreamState mmdit_block(const BoundParams& bp, const ModelConfig& c, StreamState s,
                               const Tensor& ctx, const Tensor& emb_a, const Tensor& emb_o,
                               const std::string& prefix_a, const std::string& prefix_o,
                               int layer_index, const ForwardOptions& opt) {
    using namespace model_detail;
    const int d = c.d_model;
    Modulation ma = modulation(bp, prefix_a, emb_a, d);
    Modulation mo = modulation(bp, prefix_o, emb_o, d);
    Tensor ha = modulate(s.action_tokens, ma.shift_attn, ma.scale_attn);
    Tensor ho = modulate(s.vision_tokens, mo.shift_attn, mo.scale_attn);

    const bool cross = c.interleave_cross && (layer_index % 2 == 1);
    Tensor attn_a, attn_o;
    if (cross) {
        Qkv qa = project_qkv(bp, prefix_a, ha, ctx);
        Qkv qo = project_qkv(bp, prefix_o, ho, ctx);
        attn_a = attention_core(qa.q, qa.k, qa.v, c.n_heads);
        attn_o = attention_core(qo.q, qo.k, qo.v, c.n_heads);
    } else {
        Qkv qa = project_qkv(bp, prefix_a, ha, ha);
        Qkv qo = project_qkv(bp, prefix_o, ho, ho);
        if (opt.mask_cross_modal) {
            attn_a = attention_core(qa.q, qa.k, qa.v, c.n_heads);
            attn_o = attention_core(qo.q, qo.k, qo.v, c.n_heads);
        } else {
            Tensor q = concat({qa.q, qo.q}, 0);
            Tensor k = concat({qa.k, qo.k}, 0);
            Tensor v = concat({qa.v, qo.v}, 0);
            Tensor joint = attention_core(q, k, v, c.n_heads);
            std::vector<Tensor> back = split(joint, 0, {1 + c.k, c.m});
            attn_a = back[0];
            attn_o = back[1];
        }
    }
    attn_a = linear(bp, prefix_a + ".attn.o", attn_a);
    attn_o = linear(bp, prefix_o + ".attn.o", attn_o);
    s.action_tokens = gated_residual(s.action_tokens, attn_a, ma.gate_attn);
    s.vision_tokens = gated_residual(s.vision_tokens, attn_o, mo.gate_attn);

    Tensor mlp_a = mlp(bp, prefix_a, modulate(s.action_tokens, ma.shift_mlp, ma.scale_mlp));
    Tensor mlp_o = mlp(bp, prefix_o, modulate(s.vision_tokens, mo.shift_mlp, mo.scale_mlp));
    s.action_tokens = gated_residual(s.action_tokens, mlp_a, ma.gate_mlp);
    s.vision_tokens = gated_residual(s.vision_tokens, mlp_o, mo.gate_mlp);
    return s;
}

// Single-stream AdaLN DiT block; same alternating self/cross rule.
inline Tensor dit_tail_block(const BoundParams& bp, const ModelConfig& c, Tensor tokens,
                             const Tensor& ctx, const Tensor& emb, const std::string& prefix,
                             int layer_index) {
    using namespace model_detail;
    Modulation m = modulation(bp, prefix, emb, c.d_model);
    Tensor h = modulate(tokens, m.shift_attn, m.scale_attn);
    const bool cross = c.interleave_cross && (layer_index % 2 == 1);
    Qkv qkv = cross ? project_qkv(bp, prefix, h, ctx) : project_qkv(bp, prefix, h, h);
    Tensor attn = attention_core(qkv.q, qkv.k, qkv.v, c.n_heads);
    attn = linear(bp, prefix + ".attn.o", attn);
    tokens = gated_residual(tokens, attn, m.gate_attn);
    Tensor mlp_out = mlp(bp, prefix, modulate(tokens, m.shift_mlp, m.scale_mlp));
    return gated_residual(tokens, mlp_out, m.gate_mlp);
}

namespace model_detail {

// Single-pathway ablation block: all tokens share one parameter set; AdaLN
// shift/scale/gate are still computed per modality segment.
inline Tensor single_stream_block(const BoundParams& bp, const ModelConfig& c, Tensor tokens,
                                  const Tensor& ctx, const Tensor& emb_a, const Tensor& emb_o,
                                  const std::string& prefix, int layer_index) {
    const int d = c.d_model;
    const int na = 1 + c.k;
    Modulation ma = modulation(bp, prefix, emb_a, d);
    Modulation mo = modulation(bp, prefix, emb_o, d);
    auto modulate_segments = [&](const Tensor& x, const Tensor& sh_a, const Tensor& sc_a,
                                 const Tensor& sh_o, const Tensor& sc_o) {
        std::vector<Tensor> seg = split(x, 0, {na, c.m});
        return concat({modulate(seg[0], sh_a, sc_a), modulate(seg[1], sh_o, sc_o)}, 0);
    };
    auto gate_segments = [&](const Tensor& delta, const Tensor& g_a, const Tensor& g_o) {
        std::vector<Tensor> seg = split(delta, 0, {na, c.m});
        return concat({mul(seg[0], g_a), mul(seg[1], g_o)}, 0);
    };

    Tensor h = modulate_segments(tokens, ma.shift_attn, ma.scale_attn, mo.shift_attn, mo.scale_attn);
    const bool cross = c.interleave_cross && (layer_index % 2 == 1);
    Qkv qkv = cross ? project_qkv(bp, prefix, h, ctx) : project_qkv(bp, prefix, h, h);
    Tensor attn = linear(bp, prefix + ".attn.o", attention_core(qkv.q, qkv.k, qkv.v, c.n_heads));
    tokens = add(tokens, gate_segments(attn, ma.gate_attn, mo.gate_attn));

    Tensor h2 = modulate_segments(tokens, ma.shift_mlp, ma.scale_mlp, mo.shift_mlp, mo.scale_mlp);
    Tensor mlp_out = mlp(bp, prefix, h2);
    return add(tokens, gate_segments(mlp_out, ma.gate_mlp, mo.gate_mlp));
}

}  // namespace model_detail

// Full velocity-network forward: (V_theta^A, V_theta^o).
inline ForwardResult forward(const BoundParams& bp, const ModelConfig& c, const Tensor& ctx,
                             const Tensor& state, const Tensor& noisy_action,
                             const Tensor& noisy_future, double tau_a, double tau_o,
                             const ForwardOptions& opt = {}) {
    using namespace model_detail;
    Tensor emb_a = timestep_embedding(bp, c, tau_a);
    Tensor emb_o = c.adaln_mode == AdalnMode::Global ? emb_a : timestep_embedding(bp, c, tau_o);

    StreamState s = encode_inputs(bp, c, state, noisy_action, noisy_future);
    if (c.arch_mode == ArchMode::Mmdit) {
        for (int i = 0; i < c.n_mmdit; ++i) {
            s = mmdit_block(bp, c, s, ctx, emb_a, emb_o, "mmdit." + std::to_string(i) + ".a",
                            "mmdit." + std::to_string(i) + ".o", i, opt);
        }
        for (int j = 0; j < c.n_dit; ++j) {
            const int layer = c.n_mmdit + j;
            s.action_tokens = dit_tail_block(bp, c, s.action_tokens, ctx, emb_a,
                                             "dit." + std::to_string(j) + ".a", layer);
            s.vision_tokens = dit_tail_block(bp, c, s.vision_tokens, ctx, emb_o,
                                             "dit." + std::to_string(j) + ".o", layer);
        }
    } else {
        Tensor tokens = concat({s.action_tokens, s.vision_tokens}, 0);
        for (int i = 0; i < c.n_mmdit + c.n_dit; ++i) {
            tokens = single_stream_block(bp, c, tokens, ctx, emb_a, emb_o,
                                         "ss." + std::to_string(i), i);
        }
        std::vector<Tensor> seg = split(tokens, 0, {1 + c.k, c.m});
        s.action_tokens = seg[0];
        s.vision_tokens = seg[1];
    }

    // Decoders: the state token is dropped at decode.
    Tensor act_tokens = slice(s.action_tokens, 0, 1, c.k);
    ForwardResult out;
    out.pred_a = linear(bp, "dec.action", act_tokens);
    out.pred_o = linear(bp, "dec.vision.2", relu(linear(bp, "dec.vision.1", s.vision_tokens)));
    return out;
}

}  // namespace dust
