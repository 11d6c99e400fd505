#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "videdit/tensor.hpp"

namespace videdit {

// A latent image at a given diffusion step: pixel-space [C, H, W] values,
// tagged with the frame it belongs to and the inference-step position it
// sits at (0 = noisiest).
struct LatentFrame {
    Tensor data;
    int frame_index = 1;  // 1-based, matching the frame numbering of the clip
    int step_pos = 0;     // inference position k in [0, T]; T means fully denoised
};

// DDIM noise schedule. `alpha_bar` is indexed by train step; `timesteps`
// holds the strictly decreasing train-step indices visited at inference.
// Inference code addresses steps by *position* k in [0, T): position 0 is the
// noisiest visited step, position T-1 the cleanest, and the virtual position
// T corresponds to alpha_bar = 1 (a clean image).
struct DiffusionSchedule {
    int num_train_steps = 0;
    int num_inference_steps = 0;
    std::vector<double> alpha_bar;  // length num_train_steps
    std::vector<int> timesteps;     // length num_inference_steps, strictly decreasing
    double eta = 0.0;

    int train_step(int pos) const {
        VIDEDIT_CHECK(pos >= 0 && pos < num_inference_steps, ParameterError,
                      "step position out of range");
        return timesteps[static_cast<size_t>(pos)];
    }

    // alpha_bar at inference position; position num_inference_steps maps to 1.
    double alpha_at(int pos) const {
        VIDEDIT_CHECK(pos >= 0 && pos <= num_inference_steps, ParameterError,
                      "step position out of range");
        if (pos == num_inference_steps) return 1.0;
        return alpha_bar[static_cast<size_t>(timesteps[static_cast<size_t>(pos)])];
    }

    // DDIM sigma for the transition from position pos to pos+1.
    double sigma_at(int pos) const {
        if (eta == 0.0) return 0.0;
        const double a_t = alpha_at(pos);
        const double a_prev = alpha_at(pos + 1);
        return eta * std::sqrt((1.0 - a_prev) / (1.0 - a_t)) * std::sqrt(1.0 - a_t / a_prev);
    }
};

// Linear-beta schedule with evenly strided inference timesteps.
inline DiffusionSchedule make_schedule(int num_train_steps, int num_inference_steps,
                                       double beta_start, double beta_end, double eta) {
    VIDEDIT_CHECK(num_train_steps > 0, ParameterError, "num_train_steps must be positive");
    VIDEDIT_CHECK(num_inference_steps > 0 && num_inference_steps <= num_train_steps,
                  ParameterError, "num_inference_steps must be in (0, num_train_steps]");
    VIDEDIT_CHECK(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ParameterError,
                  "betas must satisfy 0 < beta_start <= beta_end < 1");
    VIDEDIT_CHECK(eta >= 0.0, ParameterError, "eta must be >= 0");

    DiffusionSchedule s;
    s.num_train_steps = num_train_steps;
    s.num_inference_steps = num_inference_steps;
    s.eta = eta;
    s.alpha_bar.resize(static_cast<size_t>(num_train_steps));
    double prod = 1.0;
    for (int t = 0; t < num_train_steps; ++t) {
        const double frac = num_train_steps > 1
                                ? static_cast<double>(t) / static_cast<double>(num_train_steps - 1)
                                : 0.0;
        const double beta = beta_start + (beta_end - beta_start) * frac;
        prod *= 1.0 - beta;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    s.timesteps.resize(static_cast<size_t>(num_inference_steps));
    for (int k = 0; k < num_inference_steps; ++k) {
        const int i = num_inference_steps - 1 - k;  // decreasing order
        s.timesteps[static_cast<size_t>(k)] = static_cast<int>(
            (static_cast<int64_t>(i) * num_train_steps) / num_inference_steps);
    }
    return s;
}

// x0_hat = (x_t - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
inline Tensor predict_x0(const LatentFrame& x_t, const Tensor& eps, int pos,
                         const DiffusionSchedule& sched) {
    VIDEDIT_CHECK(x_t.data.same_shape(eps), ShapeError, "predict_x0: eps shape mismatch");
    const double a = sched.alpha_at(pos);
    const double inv_sqrt_a = 1.0 / std::sqrt(a);
    const double coef = std::sqrt(1.0 - a);
    Tensor x0 = x_t.data;
    for (int64_t i = 0; i < x0.numel(); ++i) x0[i] = (x0[i] - coef * eps[i]) * inv_sqrt_a;
    return x0;
}

struct DdimStepResult {
    LatentFrame x_prev;  // latent at position pos + 1 (one step cleaner)
    Tensor x0_pred;
};

// One deterministic-by-default DDIM update from position pos to pos + 1:
//   x_prev = sqrt(abar_prev) * x0_hat + sqrt(1 - abar_prev - sigma^2) * eps + sigma * noise
inline DdimStepResult ddim_step(const LatentFrame& x_t, const Tensor& eps, int pos,
                                const DiffusionSchedule& sched,
                                const Tensor* noise = nullptr) {
    VIDEDIT_CHECK(x_t.data.same_shape(eps), ShapeError, "ddim_step: eps shape mismatch");
    const double a_prev = sched.alpha_at(pos + 1);
    const double sigma = sched.sigma_at(pos);
    VIDEDIT_CHECK(sigma == 0.0 || noise != nullptr, ParameterError,
                  "ddim_step: sigma > 0 requires a noise argument");

    DdimStepResult r;
    r.x0_pred = predict_x0(x_t, eps, pos, sched);
    const double c0 = std::sqrt(a_prev);
    const double c1 = std::sqrt(std::max(0.0, 1.0 - a_prev - sigma * sigma));
    Tensor out = r.x0_pred;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = c0 * out[i] + c1 * eps[i];
    if (sigma > 0.0) {
        VIDEDIT_CHECK(noise->same_shape(out), ShapeError, "ddim_step: noise shape mismatch");
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += sigma * (*noise)[i];
    }
    r.x_prev = LatentFrame{std::move(out), x_t.frame_index, pos + 1};
    return r;
}

// Algebraic inverse of the sigma = 0 step: maps the latent at position
// pos + 1 back to position pos, such that ddim_step with the same eps
// reproduces the input exactly.
inline LatentFrame ddim_invert_step(const LatentFrame& x_next, const Tensor& eps, int pos,
                                    const DiffusionSchedule& sched) {
    VIDEDIT_CHECK(sched.eta == 0.0, ConfigError,
                  "ddim_invert_step: inversion defined only for the deterministic sampler");
    VIDEDIT_CHECK(x_next.data.same_shape(eps), ShapeError, "ddim_invert_step: eps shape mismatch");
    const double a_next = sched.alpha_at(pos + 1);
    const double a_t = sched.alpha_at(pos);
    const double inv_sqrt = 1.0 / std::sqrt(a_next);
    const double c_next = std::sqrt(1.0 - a_next);
    const double c0 = std::sqrt(a_t);
    const double c1 = std::sqrt(1.0 - a_t);
    Tensor out = x_next.data;
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double x0 = (out[i] - c_next * eps[i]) * inv_sqrt;
        out[i] = c0 * x0 + c1 * eps[i];
    }
    return LatentFrame{std::move(out), x_next.frame_index, pos};
}

}  // namespace videdit
