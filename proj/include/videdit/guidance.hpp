#pragma once

#include <functional>
#include <string>

#include "videdit/autograd.hpp"
#include "videdit/schedule.hpp"
#include "videdit/tensor.hpp"

namespace videdit {

enum class GradMethod { kAutodiff, kFrozenEps, kFiniteDiff };

inline const char* to_string(GradMethod m) {
    switch (m) {
        case GradMethod::kAutodiff: return "autodiff";
        case GradMethod::kFrozenEps: return "frozen_eps";
        case GradMethod::kFiniteDiff: return "finite_diff";
    }
    return "?";
}

inline GradMethod grad_method_from_string(const std::string& s) {
    if (s == "autodiff") return GradMethod::kAutodiff;
    if (s == "frozen_eps") return GradMethod::kFrozenEps;
    if (s == "finite_diff") return GradMethod::kFiniteDiff;
    throw ParameterError("unknown grad method: " + s);
}

struct GuidanceConfig {
    double delta = 100.0;   // step size of the latent update
    int active_steps = 25;  // leading (high-noise) denoising steps with guidance on
    GradMethod grad_method = GradMethod::kAutodiff;
    bool normalize = false;  // divide the energy by element count (default: plain sum)

    void validate(int num_inference_steps) const {
        VIDEDIT_CHECK(delta >= 0.0, ParameterError, "guidance delta must be >= 0");
        VIDEDIT_CHECK(active_steps >= 0 && active_steps <= num_inference_steps, ParameterError,
                      "active_steps must lie in [0, T]");
    }

    bool active_at(int step_pos) const { return step_pos < active_steps && delta > 0.0; }
};

// Squared L2 distance between the clean-image predictions of consecutive
// frames (summed over all elements).
inline double guidance_loss(const Tensor& x0_cur, const Tensor& x0_prev) {
    VIDEDIT_CHECK(x0_cur.same_shape(x0_prev), ShapeError, "guidance_loss: shape mismatch");
    return sum_sq_diff(x0_cur, x0_prev);
}

// Noise prediction as a differentiable function of the latent, with every
// other input held fixed. The denoiser binds itself plus conditioning here;
// tests may pass plain closures.
using EpsFn = std::function<ag::Var(const ag::Var& x_t)>;

// Gradient of g(x0_hat(x_t), x0_prev) with respect to x_t.
//   autodiff:   exact reverse-mode gradient through eps_fn and the x0 formula
//   frozen_eps: treats eps as a constant => 2 (x0_hat - x0_prev) / sqrt(abar)
//   finite_diff: central differences over every coordinate (test-sized inputs)
inline Tensor compute_grad(const LatentFrame& x_t, int pos, const EpsFn& eps_fn,
                           const Tensor& x0_prev, const DiffusionSchedule& sched,
                           GradMethod method, bool normalize = false) {
    VIDEDIT_CHECK(x_t.data.same_shape(x0_prev), ShapeError, "compute_grad: x0_prev shape mismatch");
    const double a = sched.alpha_at(pos);
    const double inv_sqrt_a = 1.0 / std::sqrt(a);
    const double c1 = std::sqrt(1.0 - a);
    const double norm_factor =
        normalize ? 1.0 / static_cast<double>(x_t.data.numel()) : 1.0;

    switch (method) {
        case GradMethod::kAutodiff: {
            ag::Var x = ag::Var::leaf(x_t.data, true);
            ag::Var eps = eps_fn(x);
            ag::Var x0_hat = ag::scale(ag::sub(x, ag::scale(eps, c1)), inv_sqrt_a);
            ag::Var g = ag::sum_sq_diff(x0_hat, ag::Var::constant(x0_prev));
            if (!g.requires_grad()) return Tensor::zeros(x_t.data.shape());
            g.backward();
            Tensor grad = x.grad();
            if (normalize)
                for (int64_t i = 0; i < grad.numel(); ++i) grad[i] *= norm_factor;
            return grad;
        }
        case GradMethod::kFrozenEps: {
            ag::NoGradGuard ng;
            const Tensor eps = eps_fn(ag::Var::constant(x_t.data)).value();
            const Tensor x0_hat = predict_x0(x_t, eps, pos, sched);
            Tensor grad(x_t.data.shape());
            for (int64_t i = 0; i < grad.numel(); ++i)
                grad[i] = norm_factor * 2.0 * (x0_hat[i] - x0_prev[i]) * inv_sqrt_a;
            return grad;
        }
        case GradMethod::kFiniteDiff: {
            ag::NoGradGuard ng;
            auto g_at = [&](const Tensor& x) {
                const Tensor eps = eps_fn(ag::Var::constant(x)).value();
                const Tensor x0_hat = predict_x0({x, x_t.frame_index, pos}, eps, pos, sched);
                return norm_factor * guidance_loss(x0_hat, x0_prev);
            };
            const double h = 1e-3;
            Tensor grad(x_t.data.shape());
            for (int64_t i = 0; i < grad.numel(); ++i) {
                Tensor xp = x_t.data, xm = x_t.data;
                xp[i] += h;
                xm[i] -= h;
                grad[i] = (g_at(xp) - g_at(xm)) / (2.0 * h);
            }
            return grad;
        }
    }
    throw ParameterError("compute_grad: unknown method");
}

// x_prev <- x_prev - delta * grad
inline LatentFrame guided_update(const LatentFrame& x_prev, const Tensor& grad, double delta) {
    VIDEDIT_CHECK(delta >= 0.0, ParameterError, "guided_update: delta must be >= 0");
    VIDEDIT_CHECK(x_prev.data.same_shape(grad), ShapeError, "guided_update: grad shape mismatch");
    LatentFrame out = x_prev;
    for (int64_t i = 0; i < out.data.numel(); ++i) out.data[i] -= delta * grad[i];
    return out;
}

}  // namespace videdit
