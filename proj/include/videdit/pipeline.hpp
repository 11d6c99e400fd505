#pragma once

#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "videdit/attention_injection.hpp"
#include "videdit/clip.hpp"
#include "videdit/denoiser.hpp"
#include "videdit/guidance.hpp"
#include "videdit/metrics.hpp"
#include "videdit/schedule.hpp"

namespace videdit {

struct EditOptions {
    InjectionPolicy policy;
    GuidanceConfig guidance;
    double edit_cfg_scale = 7.5;
    double invert_cfg_scale = 1.0;
    uint64_t seed = 0;  // drawn from only by the random-previous ablation mode
};

struct GuidanceEvent {
    int frame = 0;      // 1-based
    int step_pos = 0;   // inference position
    int train_t = 0;
    double delta = 0.0;
    double energy = 0.0;  // g before the update
};

struct EditLog {
    std::vector<GuidanceEvent> guidance_events;
    std::vector<int> random_prev_choices;  // frame picked per edited frame (random mode)

    int guided_updates(int frame = -1) const {
        int n = 0;
        for (const auto& e : guidance_events)
            if (frame < 0 || e.frame == frame) ++n;
        return n;
    }
};

// All mutable state of the frame-by-frame edit: inverted noises, the anchor
// and previous-frame feature caches, and the previous frame's clean-image
// trajectory.
struct EditSession {
    const Denoiser* model = nullptr;
    DiffusionSchedule sched;
    std::string edit_prompt;
    EditOptions opts;

    std::vector<LatentFrame> inverted;
    FeatureCache anchor_features;
    FeatureCache prev_features;
    std::vector<Tensor> prev_x0;  // indexed by inference position
    std::vector<FeatureCache> history;  // retained only in random-previous mode
    EditLog log;
    Rng rng;

    EditSession(const Denoiser& m, DiffusionSchedule s, std::string prompt, EditOptions o)
        : model(&m), sched(std::move(s)), edit_prompt(std::move(prompt)), opts(o),
          rng(o.seed ^ 0xa5c1e5) {
        opts.guidance.validate(sched.num_inference_steps);
    }
};

// Uniform draw over the prior frames 1..n_prior, used by the
// anchor-plus-random-previous ablation mode (one reference per edited frame).
inline int pick_random_prev(Rng& rng, int n_prior) {
    VIDEDIT_CHECK(n_prior >= 1, ParameterError, "pick_random_prev: no prior frames");
    return 1 + static_cast<int>(rng.below(n_prior));
}

// Per-frame independent DDIM inversion conditioned on the source prompt and
// the frame's depth.
inline std::vector<LatentFrame> invert_clip(const VideoClip& clip, const Denoiser& model,
                                            const DiffusionSchedule& sched,
                                            double cfg_scale = 1.0) {
    clip.validate();
    VIDEDIT_CHECK(sched.eta == 0.0, ConfigError, "invert_clip: schedule must be deterministic");
    VIDEDIT_CHECK(clip.height() == model.config().image_size &&
                      clip.width() == model.config().image_size,
                  ShapeError, "invert_clip: clip resolution does not match the model");
    const int T = sched.num_inference_steps;
    const Tensor prompt = model.embed_prompt(clip.source_prompt);
    std::vector<LatentFrame> out;
    out.reserve(clip.frames.size());
    AttentionControl vanilla;
    for (int j = 0; j < clip.n_frames(); ++j) {
        ConditioningBundle cond{prompt, clip.depths[static_cast<size_t>(j)], cfg_scale};
        LatentFrame x{clip.frames[static_cast<size_t>(j)], j + 1, T};
        for (int k = T - 1; k >= 0; --k) {
            const auto [eps, captured] = model.denoise(x.data, sched.train_step(k), cond, vanilla);
            x = ddim_invert_step(x, eps, k, sched);
        }
        out.push_back(std::move(x));
    }
    return out;
}

struct EditedFrame {
    Tensor image;                 // final latent, clamped to [-1, 1]
    FeatureCache features;        // becomes prev for the next frame
    std::vector<Tensor> x0_traj;  // becomes prev_x0 for the next frame
};

// Runs the T denoising steps of one frame: build the injection control,
// denoise (capturing features), take the DDIM step, and for frames past the
// anchor apply the guided update against the previous frame's clean-image
// prediction during the active steps.
inline EditedFrame edit_frame(EditSession& session, int frame_index, const LatentFrame& x_T,
                              const ConditioningBundle& cond) {
    const DiffusionSchedule& sched = session.sched;
    const Denoiser& model = *session.model;
    const int T = sched.num_inference_steps;
    const InjectionPolicy& policy = session.opts.policy;
    const GuidanceConfig& gcfg = session.opts.guidance;
    const bool past_anchor = frame_index > policy.anchor_index;

    const FeatureCache* prev_src = nullptr;
    if (past_anchor && policy.mode != InjectionMode::kNone && policy.uses_prev()) {
        if (policy.mode == InjectionMode::kAnchorPlusRandomPrev) {
            VIDEDIT_CHECK(!session.history.empty(), StateError,
                          "edit_frame: random-previous mode requires retained caches");
            const int pick =
                pick_random_prev(session.rng, static_cast<int>(session.history.size()));
            session.log.random_prev_choices.push_back(pick);
            prev_src = &session.history[static_cast<size_t>(pick - 1)];
        } else {
            VIDEDIT_CHECK(!session.prev_features.empty(), StateError,
                          "edit_frame: previous-frame cache is empty");
            prev_src = &session.prev_features;
        }
    }
    if (past_anchor && gcfg.active_steps > 0 && gcfg.delta > 0.0) {
        VIDEDIT_CHECK(static_cast<int>(session.prev_x0.size()) == T, StateError,
                      "edit_frame: previous-frame x0 trajectory missing");
    }

    EditedFrame out;
    out.features.set_frame_index(frame_index);
    out.x0_traj.reserve(static_cast<size_t>(T));

    LatentFrame x = x_T;
    x.frame_index = frame_index;
    x.step_pos = 0;
    for (int k = 0; k < T; ++k) {
        const int train_t = sched.train_step(k);
        const AttentionControl ctl =
            build_control(policy, frame_index,
                          session.anchor_features.empty() ? nullptr : &session.anchor_features,
                          prev_src, k);
        const bool guided = past_anchor && gcfg.active_at(k);

        Tensor eps;
        std::map<int, Tensor> captured;
        Tensor grad;
        double energy = 0.0;
        if (guided && gcfg.grad_method == GradMethod::kAutodiff) {
            // one grad-enabled forward serves both the sampler step and the
            // guidance gradient
            ag::Var xv = ag::Var::leaf(x.data, true);
            DenoiseResult r = model.denoise_var(xv, train_t, cond, ctl);
            eps = r.eps.value();
            captured = std::move(r.captured);
            const double a = sched.alpha_at(k);
            ag::Var x0_hat =
                ag::scale(ag::sub(xv, ag::scale(r.eps, std::sqrt(1.0 - a))), 1.0 / std::sqrt(a));
            ag::Var g = ag::sum_sq_diff(x0_hat, ag::Var::constant(session.prev_x0[k]));
            if (gcfg.normalize) g = ag::scale(g, 1.0 / static_cast<double>(x.data.numel()));
            energy = g.value()[0];
            g.backward();
            grad = xv.grad();
        } else {
            std::tie(eps, captured) = model.denoise(x.data, train_t, cond, ctl);
            if (guided) {
                const Tensor x0_hat = predict_x0(x, eps, k, sched);
                energy = guidance_loss(x0_hat, session.prev_x0[k]);
                if (gcfg.normalize) energy /= static_cast<double>(x.data.numel());
                if (gcfg.grad_method == GradMethod::kFrozenEps) {
                    // closed form, reusing the eps already computed
                    const double scale_g =
                        (gcfg.normalize ? 1.0 / static_cast<double>(x.data.numel()) : 1.0) /
                        std::sqrt(sched.alpha_at(k));
                    grad = Tensor(x.data.shape());
                    for (int64_t i = 0; i < grad.numel(); ++i)
                        grad[i] = 2.0 * scale_g * (x0_hat[i] - session.prev_x0[k][i]);
                } else {
                    EpsFn eps_fn = [&](const ag::Var& xin) {
                        return model.denoise_var(xin, train_t, cond, ctl).eps;
                    };
                    grad = compute_grad(x, k, eps_fn, session.prev_x0[k], sched, gcfg.grad_method,
                                        gcfg.normalize);
                }
            }
        }

        for (auto& [layer, f] : captured) out.features.record(k, layer, std::move(f));
        auto step = ddim_step(x, eps, k, sched);
        out.x0_traj.push_back(std::move(step.x0_pred));
        if (guided) {
            step.x_prev = guided_update(step.x_prev, grad, gcfg.delta);
            session.log.guidance_events.push_back(
                {frame_index, k, train_t, gcfg.delta, energy});
        }
        x = std::move(step.x_prev);
    }
    out.image = x.data;
    clamp_signed_unit(out.image);
    return out;
}

struct EditResult {
    VideoClip clip;
    EditLog log;
};

// Algorithm: invert every frame (unless latents are supplied), then edit
// frame-by-frame, each frame reading the anchor cache and its predecessor's
// caches, and handing its own to the next.
inline EditResult edit_clip(const VideoClip& clip, const std::string& edit_prompt,
                            const Denoiser& model, const DiffusionSchedule& sched,
                            const EditOptions& opts,
                            const std::vector<LatentFrame>* latents = nullptr) {
    clip.validate();
    EditSession session(model, sched, edit_prompt, opts);
    session.inverted = latents != nullptr
                           ? *latents
                           : invert_clip(clip, model, sched, opts.invert_cfg_scale);
    VIDEDIT_CHECK(static_cast<int>(session.inverted.size()) == clip.n_frames(), ShapeError,
                  "edit_clip: latent count does not match frame count");

    const Tensor prompt = model.embed_prompt(edit_prompt);
    const bool keep_history = opts.policy.mode == InjectionMode::kAnchorPlusRandomPrev;

    EditResult result;
    result.clip.source_prompt = edit_prompt;
    result.clip.fps = clip.fps;
    result.clip.depths = clip.depths;
    result.clip.flows = clip.flows;

    for (int i = 1; i <= clip.n_frames(); ++i) {
        ConditioningBundle cond{prompt, clip.depths[static_cast<size_t>(i - 1)],
                                opts.edit_cfg_scale};
        EditedFrame out =
            edit_frame(session, i, session.inverted[static_cast<size_t>(i - 1)], cond);
        if (i == opts.policy.anchor_index && opts.policy.mode != InjectionMode::kNone)
            session.anchor_features = out.features;  // copy: prev moves on, anchor stays
        if (keep_history) session.history.push_back(out.features);
        session.prev_features = std::move(out.features);
        session.prev_x0 = std::move(out.x0_traj);
        result.clip.frames.push_back(std::move(out.image));
    }
    result.log = std::move(session.log);
    return result;
}

// ---------------------------------------------------------------------------
// ablation harness

struct AblationVariant {
    std::string name;
    InjectionPolicy policy;
    GuidanceConfig guidance;
};

// The comparison trio: the full method, the method without the latent
// update, and independent per-frame editing.
inline std::vector<AblationVariant> standard_variants(const EditOptions& base) {
    AblationVariant ours{"ours", base.policy, base.guidance};
    AblationVariant no_update{"ours_no_update", base.policy, base.guidance};
    no_update.guidance.delta = 0.0;
    AblationVariant per_frame{"per_frame", base.policy, base.guidance};
    per_frame.policy.mode = InjectionMode::kNone;
    per_frame.guidance.delta = 0.0;
    return {ours, no_update, per_frame};
}

struct AblationOptions {
    bool use_edited_flow = false;  // default: flow from the input video
    const AttributeClassifier* classifier = nullptr;
    std::string clip_id = "clip";
};

inline std::vector<FlowField> flows_for_metrics(const VideoClip& input, const VideoClip& edited,
                                                bool use_edited_flow) {
    const VideoClip& src = use_edited_flow ? edited : input;
    if (!use_edited_flow && !input.flows.empty()) return input.flows;
    std::vector<FlowField> flows;
    for (int i = 0; i + 1 < src.n_frames(); ++i)
        flows.push_back(block_matching_flow(src.frames[static_cast<size_t>(i)],
                                            src.frames[static_cast<size_t>(i + 1)]));
    return flows;
}

inline MetricsRow evaluate_edit(const VideoClip& input, const VideoClip& edited,
                                const std::string& edit_prompt, const AblationOptions& aopts,
                                const std::string& variant_name) {
    MetricsRow row;
    row.clip_id = aopts.clip_id;
    row.variant = variant_name;
    row.n_frames = edited.n_frames();
    row.resolution = edited.height();
    if (edited.n_frames() >= 2) {
        const auto flows = flows_for_metrics(input, edited, aopts.use_edited_flow);
        row.pixel_mse = pixel_mse(edited.frames, flows);
        row.frame_similarity = frame_similarity(edited.frames, toy_embedding_backend());
    } else {
        row.frame_similarity = 1.0;
    }
    if (aopts.classifier != nullptr)
        row.prompt_fidelity = prompt_fidelity(edited.frames, edit_prompt, *aopts.classifier);
    return row;
}

// One metrics row per variant. Inversion runs once and is shared.
inline std::vector<MetricsRow> run_ablation(const VideoClip& clip, const std::string& edit_prompt,
                                            const std::vector<AblationVariant>& variants,
                                            const Denoiser& model, const DiffusionSchedule& sched,
                                            const EditOptions& base,
                                            const AblationOptions& aopts = {}) {
    VIDEDIT_CHECK(!variants.empty(), ParameterError, "run_ablation: no variants");
    const std::vector<LatentFrame> latents =
        invert_clip(clip, model, sched, base.invert_cfg_scale);
    std::vector<MetricsRow> rows;
    rows.reserve(variants.size());
    for (const auto& variant : variants) {
        EditOptions opts = base;
        opts.policy = variant.policy;
        opts.guidance = variant.guidance;
        const EditResult res = edit_clip(clip, edit_prompt, model, sched, opts, &latents);
        rows.push_back(evaluate_edit(clip, res.clip, edit_prompt, aopts, variant.name));
    }
    return rows;
}

}  // namespace videdit
