#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>

#include "dust/rng.hpp"
#include "dust/tensor.hpp"

namespace dust {

// Beta-skewed timestep schedule. Draws x ~ Beta(alpha, beta) via inverse CDF
// (exact for beta == 1: x = u^(1/alpha)) and returns tau = s * (1 - x), so
// mass concentrates at high noise (low tau); tau = 1 is clean data. The
// interpretation is isolated here so it can be flipped by configuration.
struct TimestepSampler {
    double alpha = 1.5;
    double beta = 1.0;
    double s = 0.999;
    bool bias_high_noise = true;
};

inline double sample_timestep(SeededRng& rng, const TimestepSampler& sampler) {
    if (sampler.beta != 1.0) {
        throw std::runtime_error("sample_timestep: inverse-CDF draw requires beta == 1");
    }
    const double u = rng.uniform();
    const double x = std::pow(u, 1.0 / sampler.alpha);
    return sampler.bias_high_noise ? sampler.s * (1.0 - x) : sampler.s * x;
}

enum class NoiseMode { Decoupled, Joint };
enum class LossMode { Full, WmOnly, ActionOnly };

struct LossConfig {
    double lambda_wm = 1.0;
    NoiseMode noise_mode = NoiseMode::Decoupled;
    LossMode loss_mode = LossMode::Full;
};

// One training example after noising: the clean pair, its independent
// timesteps and noises, and the linear interpolants.
struct NoisedBatch {
    Tensor context;        // (n_ctx, d_model)
    Tensor state;          // (d_s,)
    Tensor clean_action;   // (k, d_a)
    Tensor clean_future;   // (m, d_o)
    double tau_a = 0.0;
    double tau_o = 0.0;
    Tensor eps_a;
    Tensor eps_o;
    Tensor noisy_action;
    Tensor noisy_future;
};

inline Tensor lerp_noise(const Tensor& clean, const Tensor& eps, double tau) {
    return add(scale(clean, tau), scale(eps, 1.0 - tau));
}

// Modality-decoupled noising: independent (tau_a, tau_o) unless joint mode
// shares one draw. Forced taus are test hooks; wm_only training forces
// tau_a = 0 at the call site (action tokens start as pure noise).
inline NoisedBatch make_noised_batch(SeededRng& rng, const TimestepSampler& sampler,
                                     const Tensor& context, const Tensor& state,
                                     const Tensor& clean_action, const Tensor& clean_future,
                                     NoiseMode noise_mode,
                                     std::optional<double> force_tau_a = std::nullopt,
                                     std::optional<double> force_tau_o = std::nullopt) {
    NoisedBatch b;
    b.context = context;
    b.state = state;
    b.clean_action = clean_action;
    b.clean_future = clean_future;
    b.tau_a = sample_timestep(rng, sampler);
    b.tau_o = noise_mode == NoiseMode::Joint ? b.tau_a : sample_timestep(rng, sampler);
    if (force_tau_a) b.tau_a = *force_tau_a;
    if (force_tau_o) b.tau_o = *force_tau_o;
    if (noise_mode == NoiseMode::Joint) b.tau_o = b.tau_a;
    b.eps_a = gaussian_sample(rng, clean_action.shape);
    b.eps_o = gaussian_sample(rng, clean_future.shape);
    b.noisy_action = lerp_noise(clean_action, b.eps_a, b.tau_a);
    b.noisy_future = lerp_noise(clean_future, b.eps_o, b.tau_o);
    return b;
}

// Linear-path velocity targets: constant in tau.
struct VelocityTargets {
    Tensor u_a;
    Tensor u_o;
};

inline VelocityTargets velocity_targets(const NoisedBatch& batch) {
    return {sub(batch.clean_action, batch.eps_a), sub(batch.clean_future, batch.eps_o)};
}

struct JointLoss {
    Tensor joint;
    Tensor action;
    Tensor wm;
};

// L_A and L_WM are element-mean squared errors, so lambda_wm = 1 weights the
// modalities evenly regardless of their dimensionality. The joint loss is
// built as the literal weighted sum; wm_only / action_only zero out the
// excluded term while still computing it for metrics.
inline JointLoss joint_loss(const Tensor& pred_a, const Tensor& pred_o, const VelocityTargets& t,
                            const LossConfig& cfg) {
    JointLoss out;
    out.action = mse(pred_a, t.u_a);
    out.wm = mse(pred_o, t.u_o);
    switch (cfg.loss_mode) {
        case LossMode::Full:
            out.joint = add(out.action, scale(out.wm, cfg.lambda_wm));
            break;
        case LossMode::WmOnly:
            out.joint = scale(out.wm, cfg.lambda_wm);
            break;
        case LossMode::ActionOnly:
            out.joint = add(out.action, scale(out.wm, 0.0));
            break;
    }
    return out;
}

}  // namespace dust
