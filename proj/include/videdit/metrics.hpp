#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "videdit/autograd.hpp"
#include "videdit/clip.hpp"
#include "videdit/synth.hpp"
#include "videdit/tensor.hpp"
#include "videdit/training.hpp"

namespace videdit {

// ---------------------------------------------------------------------------
// warping

struct WarpResult {
    Tensor image;  // [3, H, W]
    Tensor mask;   // [1, H, W], 1 where the sample stayed in bounds
};

// Backward-samples `frame` so that, with the forward flow of the pair
// (i -> i+1), the result lines up with frame i+1:
//   out(y, x) = bilinear(frame, x - flow_x(y, x), y - flow_y(y, x)).
inline WarpResult warp(const Tensor& frame, const FlowField& flow) {
    VIDEDIT_CHECK(frame.ndim() == 3 && frame.dim(0) == 3, ShapeError, "warp: frame must be [3,H,W]");
    VIDEDIT_CHECK(flow.flow.ndim() == 3 && flow.flow.dim(0) == 2 &&
                      flow.flow.dim(1) == frame.dim(1) && flow.flow.dim(2) == frame.dim(2),
                  ShapeError, "warp: flow shape mismatch");
    const int h = frame.dim(1), w = frame.dim(2);
    WarpResult r{Tensor::zeros({3, h, w}), Tensor::zeros({1, h, w})};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double sx = x - flow.flow.at(0, y, x);
            const double sy = y - flow.flow.at(1, y, x);
            if (sx < 0.0 || sy < 0.0 || sx > w - 1.0 || sy > h - 1.0) continue;
            const int x0 = std::min(static_cast<int>(sx), w - 2 >= 0 ? w - 2 : 0);
            const int y0 = std::min(static_cast<int>(sy), h - 2 >= 0 ? h - 2 : 0);
            const double fx = sx - x0, fy = sy - y0;
            for (int c = 0; c < 3; ++c) {
                const double v = (1 - fy) * ((1 - fx) * frame.at(c, y0, x0) +
                                             fx * frame.at(c, y0, x0 + 1)) +
                                 fy * ((1 - fx) * frame.at(c, y0 + 1, x0) +
                                       fx * frame.at(c, y0 + 1, x0 + 1));
                r.image.at(c, y, x) = v;
            }
            r.mask.at(0, y, x) = 1.0;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// temporal metrics

// Mean over frame pairs of the masked per-pixel squared error between
// warp(frame_i) and frame_{i+1}, on the 0..255 display scale. Pixels whose
// warp sample left the image or whose flow is flagged invalid are excluded.
inline double pixel_mse(const std::vector<Tensor>& frames, const std::vector<FlowField>& flows) {
    VIDEDIT_CHECK(frames.size() >= 2, ParameterError, "pixel_mse: need at least two frames");
    VIDEDIT_CHECK(flows.size() + 1 == frames.size(), ParameterError,
                  "pixel_mse: flow count must be n-1");
    double total = 0.0;
    for (size_t i = 0; i + 1 < frames.size(); ++i) {
        const WarpResult wr = warp(frames[i], flows[i]);
        const Tensor& target = frames[i + 1];
        VIDEDIT_CHECK(target.same_shape(frames[i]), ShapeError, "pixel_mse: frame shape mismatch");
        const int h = target.dim(1), w = target.dim(2);
        double err = 0.0;
        int64_t count = 0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                if (wr.mask.at(0, y, x) < 0.5 || !flows[i].valid_at(y, x)) continue;
                double pix = 0.0;
                for (int c = 0; c < 3; ++c) {
                    // difference taken in signed space, then scaled to 0..255
                    const double d = 127.5 * (wr.image.at(c, y, x) - target.at(c, y, x));
                    pix += d * d;
                }
                err += pix / 3.0;
                ++count;
            }
        }
        total += count > 0 ? err / static_cast<double>(count) : 0.0;
    }
    return total / static_cast<double>(flows.size());
}

// ---------------------------------------------------------------------------
// embeddings

struct EmbeddingBackend {
    std::string name;
    std::function<Tensor(const Tensor&)> embed_image;        // image -> unit vector
    std::function<Tensor(const std::string&)> embed_text;    // optional
};

// 8x8 grayscale average-pool, mean-removed, L2-normalized. Invariant to
// positive affine rescaling of the input image.
inline EmbeddingBackend toy_embedding_backend() {
    EmbeddingBackend b;
    b.name = "gray8";
    b.embed_image = [](const Tensor& img) {
        VIDEDIT_CHECK(img.ndim() == 3 && img.dim(0) == 3, ShapeError,
                      "embed_image: expects [3,H,W]");
        const int h = img.dim(1), w = img.dim(2);
        constexpr int kGrid = 8;
        Tensor e({kGrid * kGrid});
        for (int gy = 0; gy < kGrid; ++gy) {
            for (int gx = 0; gx < kGrid; ++gx) {
                const int y0 = gy * h / kGrid, y1 = (gy + 1) * h / kGrid;
                const int x0 = gx * w / kGrid, x1 = (gx + 1) * w / kGrid;
                double s = 0.0;
                int64_t n = 0;
                for (int y = y0; y < std::max(y1, y0 + 1); ++y)
                    for (int x = x0; x < std::max(x1, x0 + 1); ++x) {
                        s += (img.at(0, y, x) + img.at(1, y, x) + img.at(2, y, x)) / 3.0;
                        ++n;
                    }
                e[gy * kGrid + gx] = s / static_cast<double>(n);
            }
        }
        double mean = 0.0;
        for (int64_t i = 0; i < e.numel(); ++i) mean += e[i];
        mean /= static_cast<double>(e.numel());
        double norm = 0.0;
        for (int64_t i = 0; i < e.numel(); ++i) {
            e[i] -= mean;
            norm += e[i] * e[i];
        }
        norm = std::sqrt(norm);
        if (norm > 1e-12)
            for (int64_t i = 0; i < e.numel(); ++i) e[i] /= norm;
        return e;
    };
    return b;
}

inline double cosine(const Tensor& a, const Tensor& b) {
    VIDEDIT_CHECK(a.same_shape(b), ShapeError, "cosine: shape mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 1e-24 || nb <= 1e-24) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Mean cosine similarity between embeddings of consecutive frames.
inline double frame_similarity(const std::vector<Tensor>& frames, const EmbeddingBackend& backend) {
    VIDEDIT_CHECK(frames.size() >= 2, ParameterError, "frame_similarity: need at least 2 frames");
    std::vector<Tensor> emb;
    emb.reserve(frames.size());
    for (const auto& f : frames) emb.push_back(backend.embed_image(f));
    double s = 0.0;
    for (size_t i = 0; i + 1 < emb.size(); ++i) s += cosine(emb[i], emb[i + 1]);
    return s / static_cast<double>(emb.size() - 1);
}

// ---------------------------------------------------------------------------
// attribute classifier (prompt fidelity)

// Two-head MLP over a 16x16 downsample: color class and shape class. Stands
// in for the text-image similarity score at desk scale.
class AttributeClassifier {
public:
    static constexpr int kPatch = 12;
    static constexpr int kFeatDim = kPatch * kPatch + 7;

    AttributeClassifier() = default;
    explicit AttributeClassifier(uint64_t seed) {
        Rng rng(seed);
        const int hidden = 48;
        const int out_dim = static_cast<int>(corpus_colors().size() + corpus_shapes().size());
        params_["fc1.w"] =
            ag::Var::leaf(Tensor::randn({hidden, kFeatDim}, rng, std::sqrt(2.0 / kFeatDim)), true);
        params_["fc1.b"] = ag::Var::leaf(Tensor::zeros({hidden}), true);
        params_["fc2.w"] =
            ag::Var::leaf(Tensor::randn({out_dim, hidden}, rng, std::sqrt(2.0 / hidden)), true);
        params_["fc2.b"] = ag::Var::leaf(Tensor::zeros({out_dim}), true);
    }

    // Position- and scale-invariant features: the foreground is segmented
    // against the border color, then its silhouette is resampled on a grid
    // centered at the centroid and scaled by the RMS radius. Foreground and
    // background mean colors carry the color attribute.
    static Tensor features(const Tensor& img) {
        const int h = img.dim(1), w = img.dim(2);
        // background reference: mean over the border ring
        double bg[3] = {0.0, 0.0, 0.0};
        int64_t nb = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                if (y > 1 && y < h - 2 && x > 1 && x < w - 2) continue;
                for (int c = 0; c < 3; ++c) bg[c] += img.at(c, y, x);
                ++nb;
            }
        for (double& v : bg) v /= static_cast<double>(nb);

        // foreground mask by color distance
        std::vector<uint8_t> mask(static_cast<size_t>(h) * w, 0);
        double cx = 0.0, cy = 0.0, fg[3] = {0.0, 0.0, 0.0};
        int64_t nf = 0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double d2 = 0.0;
                for (int c = 0; c < 3; ++c) {
                    const double d = img.at(c, y, x) - bg[c];
                    d2 += d * d;
                }
                if (d2 > 0.45 * 0.45) {
                    mask[static_cast<size_t>(y) * w + x] = 1;
                    cx += x;
                    cy += y;
                    for (int c = 0; c < 3; ++c) fg[c] += img.at(c, y, x);
                    ++nf;
                }
            }

        Tensor f({1, kFeatDim});
        if (nf < 4) return f;  // featureless input
        cx /= static_cast<double>(nf);
        cy /= static_cast<double>(nf);
        for (double& v : fg) v /= static_cast<double>(nf);
        double r2 = 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                if (mask[static_cast<size_t>(y) * w + x])
                    r2 += (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const double radius = std::sqrt(r2 / static_cast<double>(nf));

        // normalized silhouette patch over [-2.2r, 2.2r]^2 around the centroid
        const double span = 2.2 * std::max(radius, 1.0);
        int64_t idx = 0;
        for (int gy = 0; gy < kPatch; ++gy)
            for (int gx = 0; gx < kPatch; ++gx) {
                const double sx = cx + span * (2.0 * (gx + 0.5) / kPatch - 1.0);
                const double sy = cy + span * (2.0 * (gy + 0.5) / kPatch - 1.0);
                const int ix = static_cast<int>(std::lround(sx));
                const int iy = static_cast<int>(std::lround(sy));
                f[idx++] = (ix >= 0 && ix < w && iy >= 0 && iy < h)
                               ? mask[static_cast<size_t>(iy) * w + ix]
                               : 0.0;
            }
        for (int c = 0; c < 3; ++c) f[idx++] = fg[c];
        for (int c = 0; c < 3; ++c) f[idx++] = bg[c];
        f[idx++] = radius / static_cast<double>(std::max(h, w));
        return f;
    }

    // logits: first the color classes, then the shape classes
    ag::Var logits(const ag::Var& feat) const {
        ag::Var h = ag::silu(ag::linear(feat, params_.at("fc1.w"), params_.at("fc1.b")));
        return ag::linear(h, params_.at("fc2.w"), params_.at("fc2.b"));
    }

    void train(const std::vector<CorpusExample>& corpus, int steps = 400, uint64_t seed = 5,
               double lr = 2e-3) {
        VIDEDIT_CHECK(!corpus.empty(), ParameterError, "classifier training needs data");
        Rng rng(seed);
        Adam adam(lr);
        const int nc = static_cast<int>(corpus_colors().size());
        for (int step = 0; step < steps; ++step) {
            for (auto& [k, p] : params_) p.zero_grad();
            for (int b = 0; b < 8; ++b) {
                const auto& ex = corpus[static_cast<size_t>(rng.below(corpus.size()))];
                const ag::Var feat = ag::Var::constant(features(ex.sample.image));
                const ag::Var lg = logits(feat);
                const int color_t = class_index(corpus_colors(), ex.color);
                const int shape_t = class_index(corpus_shapes(), ex.shape);
                // split logits: color head = first nc entries, shape head = rest
                ag::Var loss = ag::add(head_loss(lg, 0, nc, color_t),
                                       head_loss(lg, nc, logit_dim() - nc, shape_t));
                ag::scale(loss, 1.0 / 8.0).backward();
            }
            adam.step(params_);
        }
    }

    struct Scores {
        double color_score = 0.0;  // fraction of frames classified as the target color
        double shape_score = 0.0;
        double combined = 0.0;     // mean per-frame attribute accuracy
    };

    Scores score_frames(const std::vector<Tensor>& frames, const std::string& color,
                        const std::string& shape) const {
        const int ci = class_index(corpus_colors(), color);
        const int si = class_index(corpus_shapes(), shape);
        const int nc = static_cast<int>(corpus_colors().size());
        Scores s;
        ag::NoGradGuard ng;
        for (const auto& f : frames) {
            const Tensor lg = logits(ag::Var::constant(features(f))).value();
            const int pc = argmax(lg, 0, nc);
            const int ps = argmax(lg, nc, logit_dim());
            s.color_score += pc == ci ? 1.0 : 0.0;
            s.shape_score += (ps - nc) == si ? 1.0 : 0.0;
        }
        s.color_score /= static_cast<double>(frames.size());
        s.shape_score /= static_cast<double>(frames.size());
        s.combined = 0.5 * (s.color_score + s.shape_score);
        return s;
    }

    std::map<std::string, ag::Var>& params() { return params_; }
    const std::map<std::string, ag::Var>& params() const { return params_; }

private:
    static int class_index(const std::vector<std::string>& classes, const std::string& name) {
        for (size_t i = 0; i < classes.size(); ++i)
            if (classes[i] == name) return static_cast<int>(i);
        throw ParameterError("attribute not in vocabulary: " + name);
    }

    int logit_dim() const { return params_.at("fc2.b").value().dim(0); }

    static int argmax(const Tensor& row, int lo, int hi) {
        int best = lo;
        for (int j = lo + 1; j < hi; ++j)
            if (row[j] > row[best]) best = j;
        return best;
    }

    // cross entropy over a contiguous slice of the logit row
    static ag::Var head_loss(const ag::Var& lg, int offset, int len, int target) {
        Tensor w(std::vector<int>{len, lg.value().dim(1)});
        for (int i = 0; i < len; ++i) w.at(i, offset + i) = 1.0;
        ag::Var slice = ag::matmul(lg, ag::transpose(ag::Var::constant(w)));
        return ag::cross_entropy_logits(slice, target);
    }

    std::map<std::string, ag::Var> params_;
};

// Mean per-frame attribute accuracy of the prompt's color / shape words.
// Errors if the prompt names no known color or shape.
inline double prompt_fidelity(const std::vector<Tensor>& frames, const std::string& edit_prompt,
                              const AttributeClassifier& classifier) {
    std::string color, shape;
    std::istringstream in(edit_prompt);
    std::string word;
    while (in >> word) {
        for (auto& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        for (const auto& c : corpus_colors())
            if (word == c) color = word;
        for (const auto& s : corpus_shapes())
            if (word == s) shape = word;
    }
    VIDEDIT_CHECK(!color.empty() || !shape.empty(), ParameterError,
                  "prompt_fidelity: prompt names no known color or shape attribute");
    const auto sc = classifier.score_frames(frames, color.empty() ? corpus_colors()[0] : color,
                                            shape.empty() ? corpus_shapes()[0] : shape);
    if (color.empty()) return sc.shape_score;
    if (shape.empty()) return sc.color_score;
    return sc.combined;
}

// ---------------------------------------------------------------------------
// block-matching flow

// Integer per-block displacement minimizing SSD within the search radius,
// broadcast to every pixel of the block. Edge blocks are truncated. The
// validity mask flags forward-backward inconsistent blocks (occlusion).
inline FlowField block_matching_flow(const Tensor& f1, const Tensor& f2, int block = 8,
                                     int radius = 4) {
    VIDEDIT_CHECK(f1.same_shape(f2), ShapeError, "block_matching_flow: shape mismatch");
    VIDEDIT_CHECK(radius > 0, ParameterError, "block_matching_flow: radius must be positive");
    VIDEDIT_CHECK(block > 0, ParameterError, "block_matching_flow: block must be positive");
    const int h = f1.dim(1), w = f1.dim(2);

    auto match = [&](const Tensor& a, const Tensor& b, Tensor& flow) {
        for (int by = 0; by < h; by += block) {
            for (int bx = 0; bx < w; bx += block) {
                const int y1 = std::min(by + block, h), x1 = std::min(bx + block, w);
                double best = std::numeric_limits<double>::max();
                int best_dx = 0, best_dy = 0;
                for (int dy = -radius; dy <= radius; ++dy) {
                    if (by + dy < 0 || y1 + dy > h) continue;
                    for (int dx = -radius; dx <= radius; ++dx) {
                        if (bx + dx < 0 || x1 + dx > w) continue;
                        double ssd = 0.0;
                        // abandon only when strictly worse, so ties carry a
                        // fully computed SSD into the tie-break below
                        for (int c = 0; c < 3 && ssd <= best; ++c)
                            for (int y = by; y < y1; ++y)
                                for (int x = bx; x < x1; ++x) {
                                    const double d = a.at(c, y, x) - b.at(c, y + dy, x + dx);
                                    ssd += d * d;
                                }
                        if (ssd < best ||
                            (ssd == best && std::abs(dx) + std::abs(dy) <
                                                std::abs(best_dx) + std::abs(best_dy))) {
                            best = ssd;
                            best_dx = dx;
                            best_dy = dy;
                        }
                    }
                }
                for (int y = by; y < y1; ++y)
                    for (int x = bx; x < x1; ++x) {
                        flow.at(0, y, x) = best_dx;
                        flow.at(1, y, x) = best_dy;
                    }
            }
        }
    };

    FlowField out;
    out.flow = Tensor::zeros({2, h, w});
    Tensor back = Tensor::zeros({2, h, w});
    match(f1, f2, out.flow);
    match(f2, f1, back);

    out.mask = Tensor::full({1, h, w}, 1.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int tx = std::clamp(x + static_cast<int>(std::lround(out.flow.at(0, y, x))), 0, w - 1);
            const int ty = std::clamp(y + static_cast<int>(std::lround(out.flow.at(1, y, x))), 0, h - 1);
            const double ex = out.flow.at(0, y, x) + back.at(0, ty, tx);
            const double ey = out.flow.at(1, y, x) + back.at(1, ty, tx);
            if (std::hypot(ex, ey) > 1.5) out.mask.at(0, y, x) = 0.0;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// report row

struct MetricsRow {
    std::string clip_id;
    std::string variant;
    double pixel_mse = 0.0;
    double frame_similarity = 0.0;
    double prompt_fidelity = -1.0;  // -1 when no classifier was supplied
    int n_frames = 0;
    int resolution = 0;
};

}  // namespace videdit
