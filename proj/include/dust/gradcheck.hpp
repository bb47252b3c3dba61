#pragma once

#include <functional>
#include <vector>

#include "dust/tensor.hpp"

namespace dust {

// Central-difference gradient oracle: (f(p + h e_i) - f(p - h e_i)) / 2h per
// coordinate. `f` must be deterministic given its parameters. Independent of
// the reverse-mode path; used as the acceptance reference for gradients().
using ScalarFn = std::function<double(const std::vector<Tensor>&)>;

inline std::vector<Tensor> finite_diff(const ScalarFn& f, const std::vector<Tensor>& params,
                                       double h = 1e-5) {
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    std::vector<Tensor> work;
    work.reserve(params.size());
    for (const Tensor& p : params) {
        work.push_back(Tensor(p.shape, std::make_shared<std::vector<double>>(*p.data)));
    }
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor g = zeros(params[pi].shape);
        for (int i = 0; i < g.numel(); ++i) {
            const double orig = (*work[pi].data)[i];
            (*work[pi].data)[i] = orig + h;
            const double fp = f(work);
            (*work[pi].data)[i] = orig - h;
            const double fm = f(work);
            (*work[pi].data)[i] = orig;
            g.ptr()[i] = (fp - fm) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

// Single-coordinate central difference; lets large-model checks probe a
// random subset of coordinates instead of the full parameter vector.
inline double finite_diff_at(const ScalarFn& f, const std::vector<Tensor>& params, size_t param_idx,
                             int coord, double h = 1e-5) {
    std::vector<Tensor> work;
    work.reserve(params.size());
    for (const Tensor& p : params) {
        work.push_back(Tensor(p.shape, std::make_shared<std::vector<double>>(*p.data)));
    }
    const double orig = (*work[param_idx].data)[coord];
    (*work[param_idx].data)[coord] = orig + h;
    const double fp = f(work);
    (*work[param_idx].data)[coord] = orig - h;
    const double fm = f(work);
    return (fp - fm) / (2.0 * h);
}

// |a - b| / max(|a|, |b|, floor); floor keeps near-zero gradients comparable.
inline double rel_err(double a, double b, double floor = 1e-6) {
    const double denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

}  // namespace dust
