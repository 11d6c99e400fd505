#pragma once

#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "videdit/autograd.hpp"
#include "videdit/tensor.hpp"

namespace videdit {

// How a denoiser forward pass treats its self-attention layers. In capture
// mode the listed layers report their input features; in inject mode the
// listed layers build K/V from externally supplied features (and may still
// capture their own, so a frame being edited can feed the next one).
enum class AttentionMode { kVanilla, kCapture, kInject };

struct AttentionControl {
    AttentionMode mode = AttentionMode::kVanilla;
    std::set<int> capture_layers;  // block indices, 1..16
    std::set<int> inject_layers;
    // layer -> ordered K/V source features ([tokens, channels] each); the
    // concatenation order is [anchor, previous].
    std::map<int, std::vector<Tensor>> injected_features;

    bool captures(int layer) const {
        return mode != AttentionMode::kVanilla && capture_layers.count(layer) > 0;
    }
    bool injects(int layer) const {
        return mode == AttentionMode::kInject && inject_layers.count(layer) > 0;
    }
};

// Per-trajectory store of self-attention input features, keyed by
// (inference step position, layer index).
class FeatureCache {
public:
    FeatureCache() = default;
    explicit FeatureCache(int frame_index) : frame_index_(frame_index) {}

    int frame_index() const { return frame_index_; }
    void set_frame_index(int f) { frame_index_ = f; }
    size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    void record(int step_pos, int layer, Tensor features) {
        const auto key = std::make_pair(step_pos, layer);
        VIDEDIT_CHECK(entries_.find(key) == entries_.end(), StateError,
                      "FeatureCache: duplicate entry for (step, layer)");
        entries_.emplace(key, std::move(features));
    }

    bool contains(int step_pos, int layer) const {
        return entries_.find({step_pos, layer}) != entries_.end();
    }

    const Tensor& get(int step_pos, int layer) const {
        const auto it = entries_.find({step_pos, layer});
        VIDEDIT_CHECK(it != entries_.end(), StateError,
                      "FeatureCache: missing entry for (step, layer)");
        return it->second;
    }

    const std::map<std::pair<int, int>, Tensor>& entries() const { return entries_; }

private:
    int frame_index_ = 0;
    std::map<std::pair<int, int>, Tensor> entries_;
};

inline void record(FeatureCache& cache, int step_pos, int layer, Tensor features) {
    cache.record(step_pos, layer, std::move(features));
}

enum class InjectionMode {
    kNone,
    kAnchorOnly,
    kPrevOnly,
    kAnchorPlusPrev,
    kAnchorPlusRandomPrev,
};

inline const char* to_string(InjectionMode m) {
    switch (m) {
        case InjectionMode::kNone: return "none";
        case InjectionMode::kAnchorOnly: return "anchor_only";
        case InjectionMode::kPrevOnly: return "prev_only";
        case InjectionMode::kAnchorPlusPrev: return "anchor_plus_prev";
        case InjectionMode::kAnchorPlusRandomPrev: return "anchor_plus_random_prev";
    }
    return "?";
}

inline InjectionMode injection_mode_from_string(const std::string& s) {
    if (s == "none") return InjectionMode::kNone;
    if (s == "anchor_only") return InjectionMode::kAnchorOnly;
    if (s == "prev_only") return InjectionMode::kPrevOnly;
    if (s == "anchor_plus_prev") return InjectionMode::kAnchorPlusPrev;
    if (s == "anchor_plus_random_prev") return InjectionMode::kAnchorPlusRandomPrev;
    throw ParameterError("unknown injection mode: " + s);
}

// Decoder blocks of the 16-block denoiser layout.
inline std::set<int> decoder_layers() { return {8, 9, 10, 11, 12, 13, 14, 15, 16}; }
inline std::set<int> all_layers() {
    return {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16};
}

struct InjectionPolicy {
    InjectionMode mode = InjectionMode::kAnchorPlusPrev;
    int anchor_index = 1;  // 1-based frame index
    std::set<int> layers = decoder_layers();

    bool uses_anchor() const {
        return mode == InjectionMode::kAnchorOnly || mode == InjectionMode::kAnchorPlusPrev ||
               mode == InjectionMode::kAnchorPlusRandomPrev;
    }
    bool uses_prev() const {
        return mode == InjectionMode::kPrevOnly || mode == InjectionMode::kAnchorPlusPrev ||
               mode == InjectionMode::kAnchorPlusRandomPrev;
    }
};

// Single-head attention whose keys and values come from the concatenation of
// the given source features while the query comes from the current ones:
//   Q = f_cur Wq^T, K = [sources] Wk^T, V = [sources] Wv^T,
//   out = softmax(Q K^T) V.
// Sources act as constants in the graph; gradients flow through the query
// path only, matching how cached features from other frames behave.
inline ag::Var cross_frame_attention(const ag::Var& f_cur, const std::vector<Tensor>& kv_sources,
                                     const ag::Var& w_q, const ag::Var& w_k,
                                     const ag::Var& w_v) {
    VIDEDIT_CHECK(!kv_sources.empty(), ParameterError,
                  "cross_frame_attention: empty source list");
    const int c = f_cur.value().dim(1);
    for (const auto& s : kv_sources)
        VIDEDIT_CHECK(s.ndim() == 2 && s.dim(1) == c, ShapeError,
                      "cross_frame_attention: source channel mismatch");
    std::vector<ag::Var> parts;
    parts.reserve(kv_sources.size());
    for (const auto& s : kv_sources) parts.push_back(ag::Var::constant(s));
    const ag::Var kv = parts.size() == 1 ? parts[0] : ag::concat_rows(parts);
    const ag::Var q = ag::matmul(f_cur, ag::transpose(w_q));
    const ag::Var k = ag::matmul(kv, ag::transpose(w_k));
    const ag::Var v = ag::matmul(kv, ag::transpose(w_v));
    const ag::Var attn = ag::softmax_rows(ag::matmul(q, ag::transpose(k)));
    return ag::matmul(attn, v);
}

// Self-attention where query and key/value share the same (trainable)
// feature matrix.
inline ag::Var self_attention(const ag::Var& f, const ag::Var& w_q, const ag::Var& w_k,
                              const ag::Var& w_v) {
    const ag::Var q = ag::matmul(f, ag::transpose(w_q));
    const ag::Var k = ag::matmul(f, ag::transpose(w_k));
    const ag::Var v = ag::matmul(f, ag::transpose(w_v));
    const ag::Var attn = ag::softmax_rows(ag::matmul(q, ag::transpose(k)));
    return ag::matmul(attn, v);
}

// Value-level convenience used by tests and oracles.
inline Tensor cross_frame_attention(const Tensor& f_cur, const std::vector<Tensor>& kv_sources,
                                    const Tensor& w_q, const Tensor& w_k, const Tensor& w_v) {
    ag::NoGradGuard ng;
    return cross_frame_attention(ag::Var::constant(f_cur), kv_sources, ag::Var::constant(w_q),
                                 ag::Var::constant(w_k), ag::Var::constant(w_v))
        .value();
}

// Assembles the attention control for one denoising step of frame
// `frame_index` under the given policy. Frames always capture over the
// policy's layers (their features feed the next frame); frames past the
// first inject the anchor/previous sources in the paper's order.
inline AttentionControl build_control(const InjectionPolicy& policy, int frame_index,
                                      const FeatureCache* anchor, const FeatureCache* prev,
                                      int step_pos) {
    AttentionControl ctl;
    if (policy.mode == InjectionMode::kNone) {
        ctl.mode = AttentionMode::kVanilla;
        return ctl;
    }
    if (frame_index <= policy.anchor_index) {
        ctl.mode = AttentionMode::kCapture;
        ctl.capture_layers = policy.layers;
        return ctl;
    }
    ctl.mode = AttentionMode::kInject;
    ctl.capture_layers = policy.layers;
    ctl.inject_layers = policy.layers;
    for (int layer : policy.layers) {
        std::vector<Tensor> sources;
        if (policy.uses_anchor()) {
            VIDEDIT_CHECK(anchor != nullptr && anchor->contains(step_pos, layer), StateError,
                          "build_control: anchor cache missing required entry");
            sources.push_back(anchor->get(step_pos, layer));
        }
        if (policy.uses_prev()) {
            VIDEDIT_CHECK(prev != nullptr && prev->contains(step_pos, layer), StateError,
                          "build_control: previous-frame cache missing required entry");
            sources.push_back(prev->get(step_pos, layer));
        }
        ctl.injected_features[layer] = std::move(sources);
    }
    return ctl;
}

}  // namespace videdit
