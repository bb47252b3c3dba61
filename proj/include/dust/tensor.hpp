#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "dust/rng.hpp"

namespace dust {

class Tape;

// Dense row-major tensor of 64-bit reals. A tensor is either a plain value
// (tape == nullptr) or attached to a differentiation tape via its node index.
// Plain values are immutable once built and safe to share across threads.
struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<double>> data;
    Tape* tape = nullptr;
    int node = -1;

    Tensor() = default;
    Tensor(std::vector<int> s, std::shared_ptr<std::vector<double>> d)
        : shape(std::move(s)), data(std::move(d)) {}

    int numel() const {
        int n = 1;
        for (int e : shape) n *= e;
        return n;
    }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    bool is_scalar() const { return numel() == 1; }
    double scalar() const { return (*data)[0]; }
    double at(int i) const { return (*data)[i]; }
    const double* ptr() const { return data->data(); }
    double* ptr() { return data->data(); }
};

inline Tensor tensor(std::vector<int> shape, std::vector<double> values) {
    int n = 1;
    for (int e : shape) n *= e;
    if (n != static_cast<int>(values.size())) {
        throw std::runtime_error("tensor: shape does not match value count");
    }
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(std::move(values)));
}

inline Tensor zeros(std::vector<int> shape) {
    int n = 1;
    for (int e : shape) n *= e;
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(n, 0.0));
}

inline Tensor full(std::vector<int> shape, double v) {
    int n = 1;
    for (int e : shape) n *= e;
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(n, v));
}

inline Tensor scalar_tensor(double v) { return tensor({1}, {v}); }

// Standard-normal tensor drawn from the documented generator.
inline Tensor gaussian_sample(SeededRng& rng, std::vector<int> shape) {
    Tensor t = zeros(std::move(shape));
    for (double& v : *t.data) v = rng.normal();
    return t;
}

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

namespace detail {

enum class Op {
    Leaf,
    Matmul,
    Add,
    AddRow,
    Sub,
    Mul,
    MulRow,
    Scale,
    Concat,
    Slice,
    Reshape,
    Transpose,
    Softmax,
    LayerNorm,
    Silu,
    Relu,
    Mean,
    Mse,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Matmul: return "matmul";
        case Op::Add: return "add";
        case Op::AddRow: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::MulRow: return "mul";
        case Op::Scale: return "scale";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::Reshape: return "reshape";
        case Op::Transpose: return "transpose";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::Silu: return "silu";
        case Op::Relu: return "relu";
        case Op::Mean: return "mean";
        case Op::Mse: return "mse";
    }
    return "?";
}

}  // namespace detail

// Append-only record of a forward computation. Nodes are topologically
// ordered by construction; one backward pass visits each node exactly once.
class Tape {
  public:
    struct Node {
        detail::Op op;
        int in0 = -1;
        int in1 = -1;
        std::vector<int> ins;           // concat only
        std::vector<int> in_shape0;     // shape of input 0
        std::vector<int> in_shape1;     // shape of input 1
        std::shared_ptr<std::vector<double>> saved0;  // input 0 values
        std::shared_ptr<std::vector<double>> saved1;  // input 1 values
        std::shared_ptr<std::vector<double>> out;     // output values
        std::vector<int> out_shape;
        int axis = 0;
        int start = 0;
        double aux = 0.0;
        std::vector<std::vector<int>> in_shapes;  // concat only
    };

    // Attach a value to the tape. Param leaves are the trainable roots that
    // gradients() reports on.
    Tensor watch(const Tensor& value, bool param = false) {
        Node n;
        n.op = detail::Op::Leaf;
        n.out = value.data;
        n.out_shape = value.shape;
        nodes_.push_back(std::move(n));
        Tensor t = value;
        t.tape = this;
        t.node = static_cast<int>(nodes_.size()) - 1;
        if (param) param_nodes_.push_back(t.node);
        return t;
    }

    int record(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

    // Reverse-mode gradients of a scalar loss with respect to the given tape
    // tensors. Params unreachable from the loss get exact zeros.
    std::vector<Tensor> gradients(const Tensor& loss, const std::vector<Tensor>& params) const;

  private:
    std::vector<Node> nodes_;
    std::vector<int> param_nodes_;
};

namespace detail {

inline void check_finite(Op op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw std::runtime_error(std::string("non-finite output in op ") + op_name(op));
        }
    }
}

[[noreturn]] inline void shape_error(Op op, const std::vector<int>& a, const std::vector<int>& b) {
    throw std::runtime_error(std::string("shape mismatch in op ") + op_name(op) + ": " +
                             shape_str(a) + " vs " + shape_str(b));
}

inline Tape* tape_of(const Tensor& a) { return a.tape; }
inline Tape* tape_of(const Tensor& a, const Tensor& b) { return a.tape ? a.tape : b.tape; }

// Record a computed node when any input is tape-tracked.
inline Tensor finish(Tape* tape, Tape::Node n, Tensor out) {
    check_finite(n.op, *out.data);
    if (tape) {
        n.out = out.data;
        n.out_shape = out.shape;
        out.tape = tape;
        out.node = tape->record(std::move(n));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward operations. Shape rules:
//   matmul     : (n,k) x (k,m) -> (n,m)
//   add/sub/mul: same shape, or (n,d) (op) (d,) broadcast over rows
//   scale      : any shape, scalar factor
//   concat     : 2-D tensors along axis 0 or 1
//   slice      : 2-D tensor, [start, start+len) along axis
//   reshape    : same element count
//   transpose  : 2-D
//   softmax    : along last axis of 1-D or 2-D, max-subtracted
//   layer_norm : along last axis, variance guard 1e-6, no affine
//   silu/relu  : elementwise
//   mean       : all elements -> scalar
//   mse        : mean((a-b)^2) over all elements -> scalar
// ---------------------------------------------------------------------------

inline constexpr double kLayerNormEps = 1e-6;

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
        detail::shape_error(detail::Op::Matmul, a.shape, b.shape);
    }
    const int n = a.shape[0], k = a.shape[1], m = b.shape[1];
    Tensor out = zeros({n, m});
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.ptr();
    for (int i = 0; i < n; ++i) {
        const double* ai = pa + i * k;
        double* oi = po + i * m;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = pb + kk * m;
            for (int j = 0; j < m; ++j) oi[j] += av * bk[j];
        }
    }
    Tape::Node nd;
    nd.op = detail::Op::Matmul;
    nd.in0 = a.node;
    nd.in1 = b.node;
    nd.in_shape0 = a.shape;
    nd.in_shape1 = b.shape;
    nd.saved0 = a.data;
    nd.saved1 = b.data;
    return detail::finish(detail::tape_of(a, b), std::move(nd), std::move(out));
}

namespace detail {

inline Tensor binary_ew(Op op, const Tensor& a, const Tensor& b) {
    const bool row_bcast = (a.shape.size() == 2 && b.shape.size() == 1 && b.shape[0] == a.shape[1]);
    if (!row_bcast && a.shape != b.shape) shape_error(op, a.shape, b.shape);
    Tensor out = zeros(a.shape);
    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.ptr();
    const int n = a.numel();
    const int d = row_bcast ? b.shape[0] : 0;
    for (int i = 0; i < n; ++i) {
        const double bv = row_bcast ? pb[i % d] : pb[i];
        switch (op) {
            case Op::Add: case Op::AddRow: po[i] = pa[i] + bv; break;
            case Op::Sub: po[i] = pa[i] - bv; break;
            case Op::Mul: case Op::MulRow: po[i] = pa[i] * bv; break;
            default: break;
        }
    }
    Tape::Node nd;
    nd.op = row_bcast ? (op == Op::Add ? Op::AddRow : (op == Op::Mul ? Op::MulRow : op)) : op;
    nd.in0 = a.node;
    nd.in1 = b.node;
    nd.in_shape0 = a.shape;
    nd.in_shape1 = b.shape;
    if (op == Op::Mul || op == Op::MulRow) {
        nd.saved0 = a.data;
        nd.saved1 = b.data;
    }
    return finish(tape_of(a, b), std::move(nd), std::move(out));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_ew(detail::Op::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_ew(detail::Op::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_ew(detail::Op::Mul, a, b); }

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = zeros(a.shape);
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * c;
    Tape::Node nd;
    nd.op = detail::Op::Scale;
    nd.in0 = a.node;
    nd.aux = c;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::runtime_error("concat: no inputs");
    for (const Tensor& p : parts) {
        if (p.shape.size() != 2) detail::shape_error(detail::Op::Concat, p.shape, parts[0].shape);
        if (axis == 0 && p.shape[1] != parts[0].shape[1]) detail::shape_error(detail::Op::Concat, p.shape, parts[0].shape);
        if (axis == 1 && p.shape[0] != parts[0].shape[0]) detail::shape_error(detail::Op::Concat, p.shape, parts[0].shape);
    }
    Tape* tape = nullptr;
    for (const Tensor& p : parts)
        if (p.tape) tape = p.tape;
    int total = 0;
    for (const Tensor& p : parts) total += p.shape[axis];
    Tensor out;
    if (axis == 0) {
        out = zeros({total, parts[0].shape[1]});
        double* po = out.ptr();
        for (const Tensor& p : parts) {
            std::copy(p.ptr(), p.ptr() + p.numel(), po);
            po += p.numel();
        }
    } else {
        const int rows = parts[0].shape[0];
        out = zeros({rows, total});
        for (int i = 0; i < rows; ++i) {
            double* po = out.ptr() + i * total;
            for (const Tensor& p : parts) {
                const int c = p.shape[1];
                std::copy(p.ptr() + i * c, p.ptr() + (i + 1) * c, po);
                po += c;
            }
        }
    }
    Tape::Node nd;
    nd.op = detail::Op::Concat;
    nd.axis = axis;
    for (const Tensor& p : parts) {
        nd.ins.push_back(p.node);
        nd.in_shapes.push_back(p.shape);
    }
    return detail::finish(tape, std::move(nd), std::move(out));
}

inline Tensor slice(const Tensor& a, int axis, int start, int len) {
    if (a.shape.size() != 2 || start < 0 || start + len > a.shape[axis]) {
        throw std::runtime_error("slice: range [" + std::to_string(start) + "," +
                                 std::to_string(start + len) + ") out of bounds for " +
                                 shape_str(a.shape) + " axis " + std::to_string(axis));
    }
    Tensor out;
    if (axis == 0) {
        out = zeros({len, a.shape[1]});
        std::copy(a.ptr() + start * a.shape[1], a.ptr() + (start + len) * a.shape[1], out.ptr());
    } else {
        out = zeros({a.shape[0], len});
        for (int i = 0; i < a.shape[0]; ++i)
            std::copy(a.ptr() + i * a.shape[1] + start, a.ptr() + i * a.shape[1] + start + len,
                      out.ptr() + i * len);
    }
    Tape::Node nd;
    nd.op = detail::Op::Slice;
    nd.in0 = a.node;
    nd.in_shape0 = a.shape;
    nd.axis = axis;
    nd.start = start;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

// concat-then-split inverse: splits along `axis` into pieces of given extents.
inline std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    if (a.shape.size() != 2 || total != a.shape[axis]) {
        detail::shape_error(detail::Op::Slice, a.shape, {total});
    }
    std::vector<Tensor> out;
    int pos = 0;
    for (int s : sizes) {
        out.push_back(slice(a, axis, pos, s));
        pos += s;
    }
    return out;
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    int n = 1;
    for (int e : shape) n *= e;
    if (n != a.numel()) detail::shape_error(detail::Op::Reshape, a.shape, shape);
    Tensor out(shape, std::make_shared<std::vector<double>>(*a.data));
    Tape::Node nd;
    nd.op = detail::Op::Reshape;
    nd.in0 = a.node;
    nd.in_shape0 = a.shape;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape.size() != 2) detail::shape_error(detail::Op::Transpose, a.shape, a.shape);
    const int n = a.shape[0], m = a.shape[1];
    Tensor out = zeros({m, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.ptr()[j * n + i] = a.ptr()[i * m + j];
    Tape::Node nd;
    nd.op = detail::Op::Transpose;
    nd.in0 = a.node;
    nd.in_shape0 = a.shape;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

// Max-subtracted softmax along the last axis.
inline Tensor softmax(const Tensor& a) {
    const int rows = a.shape.size() == 2 ? a.shape[0] : 1;
    const int cols = a.shape.size() == 2 ? a.shape[1] : a.shape[0];
    Tensor out = zeros(a.shape);
    for (int i = 0; i < rows; ++i) {
        const double* pi = a.ptr() + i * cols;
        double* po = out.ptr() + i * cols;
        double mx = pi[0];
        for (int j = 1; j < cols; ++j) mx = std::max(mx, pi[j]);
        double sum = 0.0;
        for (int j = 0; j < cols; ++j) {
            po[j] = std::exp(pi[j] - mx);
            sum += po[j];
        }
        for (int j = 0; j < cols; ++j) po[j] /= sum;
    }
    Tape::Node nd;
    nd.op = detail::Op::Softmax;
    nd.in0 = a.node;
    nd.in_shape0 = a.shape;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

// Normalizes each last-axis row to zero mean, unit variance (guard 1e-6).
inline Tensor layer_norm(const Tensor& a) {
    const int rows = a.shape.size() == 2 ? a.shape[0] : 1;
    const int cols = a.shape.size() == 2 ? a.shape[1] : a.shape[0];
    Tensor out = zeros(a.shape);
    for (int i = 0; i < rows; ++i) {
        const double* pi = a.ptr() + i * cols;
        double* po = out.ptr() + i * cols;
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) mu += pi[j];
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) var += (pi[j] - mu) * (pi[j] - mu);
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (int j = 0; j < cols; ++j) po[j] = (pi[j] - mu) * inv;
    }
    Tape::Node nd;
    nd.op = detail::Op::LayerNorm;
    nd.in0 = a.node;
    nd.in_shape0 = a.shape;
    nd.saved0 = a.data;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

inline Tensor silu(const Tensor& a) {
    Tensor out = zeros(a.shape);
    const int n = a.numel();
    for (int i = 0; i < n; ++i) {
        const double x = a.ptr()[i];
        out.ptr()[i] = x / (1.0 + std::exp(-x));
    }
    Tape::Node nd;
    nd.op = detail::Op::Silu;
    nd.in0 = a.node;
    nd.saved0 = a.data;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

inline Tensor relu(const Tensor& a) {
    Tensor out = zeros(a.shape);
    const int n = a.numel();
    for (int i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] > 0.0 ? a.ptr()[i] : 0.0;
    Tape::Node nd;
    nd.op = detail::Op::Relu;
    nd.in0 = a.node;
    nd.saved0 = a.data;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (int i = 0; i < a.numel(); ++i) s += a.ptr()[i];
    Tensor out = scalar_tensor(s / a.numel());
    Tape::Node nd;
    nd.op = detail::Op::Mean;
    nd.in0 = a.node;
    nd.in_shape0 = a.shape;
    return detail::finish(a.tape, std::move(nd), std::move(out));
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) detail::shape_error(detail::Op::Mse, a.shape, b.shape);
    double s = 0.0;
    for (int i = 0; i < a.numel(); ++i) {
        const double d = a.ptr()[i] - b.ptr()[i];
        s += d * d;
    }
    Tensor out = scalar_tensor(s / a.numel());
    Tape::Node nd;
    nd.op = detail::Op::Mse;
    nd.in0 = a.node;
    nd.in1 = b.node;
    nd.in_shape0 = a.shape;
    nd.saved0 = a.data;
    nd.saved1 = b.data;
    return detail::finish(detail::tape_of(a, b), std::move(nd), std::move(out));
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

inline std::vector<Tensor> Tape::gradients(const Tensor& loss,
                                           const std::vector<Tensor>& params) const {
    if (!loss.is_scalar()) {
        throw std::runtime_error("gradients: loss must be scalar, got " + shape_str(loss.shape));
    }
    if (loss.tape != this || loss.node < 0) {
        throw std::runtime_error("gradients: loss is not on this tape");
    }
    std::vector<std::vector<double>> grads(nodes_.size());
    auto ensure = [&](int node) -> std::vector<double>& {
        if (grads[node].empty()) {
            int n = 1;
            for (int e : nodes_[node].out_shape) n *= e;
            grads[node].assign(n, 0.0);
        }
        return grads[node];
    };

    grads[loss.node].assign(1, 1.0);

    for (int idx = static_cast<int>(nodes_.size()) - 1; idx >= 0; --idx) {
        if (grads[idx].empty()) continue;
        const Node& nd = nodes_[idx];
        const std::vector<double>& g = grads[idx];
        using detail::Op;
        switch (nd.op) {
            case Op::Leaf:
                break;
            case Op::Matmul: {
                const int n = nd.in_shape0[0], k = nd.in_shape0[1], m = nd.in_shape1[1];
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const double* pb = nd.saved1->data();
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < m; ++j) {
                            const double gv = g[i * m + j];
                            if (gv == 0.0) continue;
                            const double* bj = pb + j;
                            for (int kk = 0; kk < k; ++kk) ga[i * k + kk] += gv * bj[kk * m];
                        }
                }
                if (nd.in1 >= 0) {
                    std::vector<double>& gb = ensure(nd.in1);
                    const double* pa = nd.saved0->data();
                    for (int i = 0; i < n; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                            const double av = pa[i * k + kk];
                            if (av == 0.0) continue;
                            const double* gi = g.data() + i * m;
                            double* gbk = gb.data() + kk * m;
                            for (int j = 0; j < m; ++j) gbk[j] += av * gi[j];
                        }
                }
                break;
            }
            case Op::Add: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (nd.in1 >= 0) {
                    std::vector<double>& gb = ensure(nd.in1);
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
                break;
            }
            case Op::AddRow: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (nd.in1 >= 0) {
                    std::vector<double>& gb = ensure(nd.in1);
                    const int d = nd.in_shape1[0];
                    for (size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
                }
                break;
            }
            case Op::Sub: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (nd.in1 >= 0) {
                    std::vector<double>& gb = ensure(nd.in1);
                    if (nd.in_shape1.size() == 1 && nd.in_shape0.size() == 2 &&
                        nd.in_shape1[0] == nd.in_shape0[1]) {
                        const int d = nd.in_shape1[0];
                        for (size_t i = 0; i < g.size(); ++i) gb[i % d] -= g[i];
                    } else {
                        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                    }
                }
                break;
            }
            case Op::Mul: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*nd.saved1)[i];
                }
                if (nd.in1 >= 0) {
                    std::vector<double>& gb = ensure(nd.in1);
                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*nd.saved0)[i];
                }
                break;
            }
            case Op::MulRow: {
                const int d = nd.in_shape1[0];
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*nd.saved1)[i % d];
                }
                if (nd.in1 >= 0) {
                    std::vector<double>& gb = ensure(nd.in1);
                    for (size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i] * (*nd.saved0)[i];
                }
                break;
            }
            case Op::Scale: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * nd.aux;
                }
                break;
            }
            case Op::Concat: {
                if (nd.axis == 0) {
                    size_t pos = 0;
                    for (size_t p = 0; p < nd.ins.size(); ++p) {
                        const int cnt = nd.in_shapes[p][0] * nd.in_shapes[p][1];
                        if (nd.ins[p] >= 0) {
                            std::vector<double>& gp = ensure(nd.ins[p]);
                            for (int i = 0; i < cnt; ++i) gp[i] += g[pos + i];
                        }
                        pos += cnt;
                    }
                } else {
                    const int rows = nd.in_shapes[0][0];
                    const int total = nd.out_shape[1];
                    int off = 0;
                    for (size_t p = 0; p < nd.ins.size(); ++p) {
                        const int c = nd.in_shapes[p][1];
                        if (nd.ins[p] >= 0) {
                            std::vector<double>& gp = ensure(nd.ins[p]);
                            for (int i = 0; i < rows; ++i)
                                for (int j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
                        }
                        off += c;
                    }
                }
                break;
            }
            case Op::Slice: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const int cols_in = nd.in_shape0[1];
                    if (nd.axis == 0) {
                        const int base = nd.start * cols_in;
                        for (size_t i = 0; i < g.size(); ++i) ga[base + i] += g[i];
                    } else {
                        const int len = nd.out_shape[1];
                        for (int i = 0; i < nd.out_shape[0]; ++i)
                            for (int j = 0; j < len; ++j)
                                ga[i * cols_in + nd.start + j] += g[i * len + j];
                    }
                }
                break;
            }
            case Op::Reshape: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                break;
            }
            case Op::Transpose: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const int n = nd.in_shape0[0], m = nd.in_shape0[1];
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < m; ++j) ga[i * m + j] += g[j * n + i];
                }
                break;
            }
            case Op::Softmax: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const int rows = nd.in_shape0.size() == 2 ? nd.in_shape0[0] : 1;
                    const int cols = nd.in_shape0.size() == 2 ? nd.in_shape0[1] : nd.in_shape0[0];
                    const std::vector<double>& y = *nd.out;
                    for (int i = 0; i < rows; ++i) {
                        double dot = 0.0;
                        for (int j = 0; j < cols; ++j) dot += g[i * cols + j] * y[i * cols + j];
                        for (int j = 0; j < cols; ++j)
                            ga[i * cols + j] += y[i * cols + j] * (g[i * cols + j] - dot);
                    }
                }
                break;
            }
            case Op::LayerNorm: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const int rows = nd.in_shape0.size() == 2 ? nd.in_shape0[0] : 1;
                    const int cols = nd.in_shape0.size() == 2 ? nd.in_shape0[1] : nd.in_shape0[0];
                    const std::vector<double>& x = *nd.saved0;
                    for (int i = 0; i < rows; ++i) {
                        const double* xi = x.data() + i * cols;
                        const double* gi = g.data() + i * cols;
                        double mu = 0.0;
                        for (int j = 0; j < cols; ++j) mu += xi[j];
                        mu /= cols;
                        double var = 0.0;
                        for (int j = 0; j < cols; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                        var /= cols;
                        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                        double gsum = 0.0, gxsum = 0.0;
                        for (int j = 0; j < cols; ++j) {
                            gsum += gi[j];
                            gxsum += gi[j] * (xi[j] - mu);
                        }
                        for (int j = 0; j < cols; ++j) {
                            const double xc = xi[j] - mu;
                            ga[i * cols + j] +=
                                inv * (gi[j] - gsum / cols - xc * inv * inv * gxsum / cols);
                        }
                    }
                }
                break;
            }
            case Op::Silu: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const std::vector<double>& x = *nd.saved0;
                    for (size_t i = 0; i < g.size(); ++i) {
                        const double s = 1.0 / (1.0 + std::exp(-x[i]));
                        ga[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                }
                break;
            }
            case Op::Relu: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const std::vector<double>& x = *nd.saved0;
                    for (size_t i = 0; i < g.size(); ++i)
                        if (x[i] > 0.0) ga[i] += g[i];
                }
                break;
            }
            case Op::Mean: {
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    const double gv = g[0] / static_cast<double>(ga.size());
                    for (double& v : ga) v += gv;
                }
                break;
            }
            case Op::Mse: {
                const size_t n = nd.saved0->size();
                const double c = 2.0 * g[0] / static_cast<double>(n);
                if (nd.in0 >= 0) {
                    std::vector<double>& ga = ensure(nd.in0);
                    for (size_t i = 0; i < n; ++i) ga[i] += c * ((*nd.saved0)[i] - (*nd.saved1)[i]);
                }
                if (nd.in1 >= 0) {
                    std::vector<double>& gb = ensure(nd.in1);
                    for (size_t i = 0; i < n; ++i) gb[i] -= c * ((*nd.saved0)[i] - (*nd.saved1)[i]);
                }
                break;
            }
        }
    }

    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Tensor& p : params) {
        if (p.tape != this || p.node < 0) {
            throw std::runtime_error("gradients: param is not on this tape");
        }
        Tensor gt = zeros(p.shape);
        if (!grads[p.node].empty()) *gt.data = grads[p.node];
        out.push_back(std::move(gt));
    }
    return out;
}

}  // namespace dust
