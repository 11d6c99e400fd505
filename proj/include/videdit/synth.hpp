#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "videdit/clip.hpp"
#include "videdit/training.hpp"

namespace videdit {

enum class ShapeKind { kCircle, kSquare, kTriangle };

inline const char* to_string(ShapeKind k) {
    switch (k) {
        case ShapeKind::kCircle: return "circle";
        case ShapeKind::kSquare: return "square";
        case ShapeKind::kTriangle: return "triangle";
    }
    return "?";
}

inline ShapeKind shape_from_string(const std::string& s) {
    if (s == "circle") return ShapeKind::kCircle;
    if (s == "square") return ShapeKind::kSquare;
    if (s == "triangle") return ShapeKind::kTriangle;
    throw ParameterError("unknown shape: " + s);
}

// Palette in [-1, 1] RGB. Color names live in the toy vocabulary; background
// names use the muted entries so foregrounds stay separable.
inline const std::map<std::string, std::array<double, 3>>& color_palette() {
    static const std::map<std::string, std::array<double, 3>> palette = {
        {"red", {0.85, -0.75, -0.75}},   {"green", {-0.75, 0.8, -0.65}},
        {"blue", {-0.75, -0.6, 0.9}},    {"yellow", {0.85, 0.8, -0.7}},
        {"orange", {0.9, 0.25, -0.7}},   {"purple", {0.5, -0.7, 0.75}},
        {"cyan", {-0.7, 0.75, 0.85}},    {"magenta", {0.85, -0.65, 0.7}},
        {"white", {0.9, 0.9, 0.9}},      {"gray", {-0.1, -0.1, -0.1}},
        {"dark", {-0.65, -0.65, -0.6}},  {"light", {0.45, 0.45, 0.5}},
        {"olive", {-0.2, 0.05, -0.45}},  {"navy", {-0.55, -0.45, -0.05}},
        {"tan", {0.3, 0.1, -0.25}},
    };
    return palette;
}

inline std::array<double, 3> color_rgb(const std::string& name) {
    const auto it = color_palette().find(name);
    VIDEDIT_CHECK(it != color_palette().end(), ParameterError, "unknown color: " + name);
    return it->second;
}

// Attribute classes scored by the toy attribute classifier.
inline const std::vector<std::string>& corpus_colors() {
    static const std::vector<std::string> c = {"red", "green", "blue", "yellow", "orange", "purple"};
    return c;
}
inline const std::vector<std::string>& corpus_shapes() {
    static const std::vector<std::string> s = {"circle", "square", "triangle"};
    return s;
}
inline const std::vector<std::string>& corpus_backgrounds() {
    static const std::vector<std::string> b = {"gray", "olive", "navy", "tan"};
    return b;
}

struct Trajectory {
    enum class Kind { kLinear, kCircular } kind = Kind::kLinear;
    double vx = 0.0, vy = 0.0;        // linear velocity, px/frame
    double orbit_radius = 0.0;        // circular
    double angular_velocity = 0.0;    // radians/frame
    double phase = 0.0;

    static Trajectory linear(double vx, double vy) {
        Trajectory t;
        t.kind = Kind::kLinear;
        t.vx = vx;
        t.vy = vy;
        return t;
    }
    static Trajectory circular(double radius, double angular_velocity, double phase = 0.0) {
        Trajectory t;
        t.kind = Kind::kCircular;
        t.orbit_radius = radius;
        t.angular_velocity = angular_velocity;
        t.phase = phase;
        return t;
    }

    // Offset of the shape center from its rest position at frame i.
    std::pair<double, double> offset(int i) const {
        if (kind == Kind::kLinear) return {vx * i, vy * i};
        const double a = phase + angular_velocity * i;
        const double a0 = phase;
        return {orbit_radius * (std::cos(a) - std::cos(a0)),
                orbit_radius * (std::sin(a) - std::sin(a0))};
    }
};

struct ShapeSpec {
    ShapeKind kind = ShapeKind::kCircle;
    std::string color = "red";
    double cx = 0.0, cy = 0.0;  // rest-position center, pixels
    double size = 10.0;         // radius / half-side / half-height
    Trajectory trajectory;
};

struct SceneSpec {
    std::vector<ShapeSpec> shapes;
    std::string background = "gray";
    int texture_id = 0;          // selects the low-frequency noise pattern
    double texture_amp = 0.25;   // amplitude of the background texture
    int resolution = 64;
    int n_frames = 8;
    uint64_t seed = 0;

    std::string caption() const {
        VIDEDIT_CHECK(!shapes.empty(), ParameterError, "scene has no shapes");
        return shapes.front().color + " " + to_string(shapes.front().kind) + " on " + background;
    }
};

namespace synth_detail {

inline std::pair<double, double> shape_center(const ShapeSpec& s, int frame) {
    const auto [ox, oy] = s.trajectory.offset(frame);
    return {s.cx + ox, s.cy + oy};
}

inline bool inside_shape(const ShapeSpec& s, double cx, double cy, double x, double y) {
    const double dx = x - cx, dy = y - cy;
    switch (s.kind) {
        case ShapeKind::kCircle:
            return dx * dx + dy * dy <= s.size * s.size;
        case ShapeKind::kSquare:
            return std::fabs(dx) <= s.size && std::fabs(dy) <= s.size;
        case ShapeKind::kTriangle: {
            // upward equilateral-ish triangle: apex at cy - size
            if (dy < -s.size || dy > s.size) return false;
            const double half_width = (dy + s.size) * 0.5;
            return std::fabs(dx) <= half_width;
        }
    }
    return false;
}

// Bilinearly interpolated low-frequency value noise on a coarse grid.
inline Tensor background_texture(int res, int texture_id, double amp,
                                 const std::array<double, 3>& base, uint64_t seed) {
    const int grid = 6 + (texture_id % 3) * 2;  // 6, 8 or 10 control points per side
    Rng rng(seed * 1315423911ull + static_cast<uint64_t>(texture_id) + 0x51ed270b);
    std::vector<double> knots(static_cast<size_t>(3 * (grid + 1) * (grid + 1)));
    for (auto& k : knots) k = amp * (2.0 * rng.uniform() - 1.0);
    Tensor img({3, res, res});
    const double cell = static_cast<double>(res) / grid;
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            const double gx = x / cell, gy = y / cell;
            const int ix = std::min(static_cast<int>(gx), grid - 1);
            const int iy = std::min(static_cast<int>(gy), grid - 1);
            const double fx = gx - ix, fy = gy - iy;
            for (int c = 0; c < 3; ++c) {
                auto knot = [&](int yy, int xx) {
                    return knots[static_cast<size_t>((c * (grid + 1) + yy) * (grid + 1) + xx)];
                };
                const double v = (1 - fy) * ((1 - fx) * knot(iy, ix) + fx * knot(iy, ix + 1)) +
                                 fy * ((1 - fx) * knot(iy + 1, ix) + fx * knot(iy + 1, ix + 1));
                img.at(c, y, x) = std::clamp(base[static_cast<size_t>(c)] + v, -1.0, 1.0);
            }
        }
    }
    return img;
}

// Union mask of all shapes at one frame.
inline std::vector<uint8_t> shapes_mask(const SceneSpec& spec, int frame) {
    const int res = spec.resolution;
    std::vector<uint8_t> m(static_cast<size_t>(res) * res, 0);
    for (const auto& s : spec.shapes) {
        const auto [cx, cy] = shape_center(s, frame);
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                if (inside_shape(s, cx, cy, x, y)) m[static_cast<size_t>(y) * res + x] = 1;
    }
    return m;
}

inline bool near_mask_boundary(const std::vector<uint8_t>& m, int res, int y, int x, int band) {
    const uint8_t v = m[static_cast<size_t>(y) * res + x];
    for (int dy = -band; dy <= band; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= res) continue;
        for (int dx = -band; dx <= band; ++dx) {
            const int xx = x + dx;
            if (xx < 0 || xx >= res) continue;
            if (m[static_cast<size_t>(yy) * res + xx] != v) return true;
        }
    }
    return false;
}

}  // namespace synth_detail

// Renders a clip with exact depth and flow ground truth. Deterministic given
// the spec. Depth: background 1.0, later shapes in the list sit nearer the
// camera (lower values). Flow fields give each shape pixel its next-frame
// displacement, zero on the background, with a validity mask that blanks the
// bands around shape boundaries where warp correspondence is undefined.
inline VideoClip generate_clip(const SceneSpec& spec) {
    VIDEDIT_CHECK(spec.resolution >= 8, ParameterError, "resolution too small");
    VIDEDIT_CHECK(spec.n_frames >= 1, ParameterError, "n_frames must be >= 1");
    VIDEDIT_CHECK(!spec.shapes.empty(), ParameterError, "scene needs at least one shape");
    const int res = spec.resolution;

    // bounds check across all frames
    double max_speed = 0.0;
    for (const auto& s : spec.shapes) {
        for (int i = 0; i < spec.n_frames; ++i) {
            const auto [cx, cy] = synth_detail::shape_center(s, i);
            VIDEDIT_CHECK(cx - s.size >= 1.0 && cx + s.size <= res - 2.0 && cy - s.size >= 1.0 &&
                              cy + s.size <= res - 2.0,
                          ParameterError, "shape leaves the frame bounds");
            if (i + 1 < spec.n_frames) {
                const auto [nx, ny] = synth_detail::shape_center(s, i + 1);
                max_speed = std::max(max_speed, std::hypot(nx - cx, ny - cy));
            }
        }
    }

    VideoClip clip;
    clip.source_prompt = spec.caption();
    const Tensor background = synth_detail::background_texture(
        res, spec.texture_id, spec.texture_amp, color_rgb(spec.background), spec.seed);

    for (int i = 0; i < spec.n_frames; ++i) {
        Tensor frame = background;
        Tensor depth = Tensor::full({1, res, res}, 1.0);
        const int n_shapes = static_cast<int>(spec.shapes.size());
        for (int si = 0; si < n_shapes; ++si) {
            const auto& s = spec.shapes[static_cast<size_t>(si)];
            const auto rgb = color_rgb(s.color);
            const auto [cx, cy] = synth_detail::shape_center(s, i);
            const double dval = n_shapes == 1 ? 0.3 : 0.3 + 0.4 * (n_shapes - 1 - si) / n_shapes;
            for (int y = 0; y < res; ++y) {
                for (int x = 0; x < res; ++x) {
                    if (!synth_detail::inside_shape(s, cx, cy, x, y)) continue;
                    for (int c = 0; c < 3; ++c) frame.at(c, y, x) = rgb[static_cast<size_t>(c)];
                    depth.at(0, y, x) = dval;
                }
            }
        }
        clip.frames.push_back(std::move(frame));
        clip.depths.push_back(std::move(depth));
    }

    const int band = static_cast<int>(std::ceil(max_speed)) + 2;
    for (int i = 0; i + 1 < spec.n_frames; ++i) {
        FlowField ff;
        ff.flow = Tensor::zeros({2, res, res});
        ff.mask = Tensor::full({1, res, res}, 1.0);
        for (const auto& s : spec.shapes) {
            const auto [cx, cy] = synth_detail::shape_center(s, i);
            const auto [nx, ny] = synth_detail::shape_center(s, i + 1);
            const double dx = nx - cx, dy = ny - cy;
            for (int y = 0; y < res; ++y) {
                for (int x = 0; x < res; ++x) {
                    if (!synth_detail::inside_shape(s, cx, cy, x, y)) continue;
                    ff.flow.at(0, y, x) = dx;
                    ff.flow.at(1, y, x) = dy;
                }
            }
        }
        const auto m0 = synth_detail::shapes_mask(spec, i);
        const auto m1 = synth_detail::shapes_mask(spec, i + 1);
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                if (synth_detail::near_mask_boundary(m0, res, y, x, band) ||
                    synth_detail::near_mask_boundary(m1, res, y, x, band))
                    ff.mask.at(0, y, x) = 0.0;
        clip.flows.push_back(std::move(ff));
    }
    return clip;
}

// Random scene over the corpus vocabulary. Color/shape pairs cycle through
// the full grid so class counts stay balanced.
inline SceneSpec random_scene(int index, int resolution, int n_frames, Rng& rng,
                              bool with_motion) {
    const auto& colors = corpus_colors();
    const auto& shapes = corpus_shapes();
    const auto& bgs = corpus_backgrounds();
    SceneSpec spec;
    spec.resolution = resolution;
    spec.n_frames = n_frames;
    spec.seed = rng.raw();
    spec.background = bgs[static_cast<size_t>(rng.below(static_cast<int64_t>(bgs.size())))];
    spec.texture_id = static_cast<int>(rng.below(3));
    spec.texture_amp = 0.15 + 0.15 * rng.uniform();

    ShapeSpec s;
    const int pair = index % static_cast<int>(colors.size() * shapes.size());
    s.color = colors[static_cast<size_t>(pair % colors.size())];
    s.kind = shape_from_string(shapes[static_cast<size_t>(pair / colors.size())]);
    s.size = resolution * (0.14 + 0.08 * rng.uniform());
    double margin = s.size + 3.0;
    if (with_motion) {
        const double speed = 1.0 + 1.5 * rng.uniform();
        const double dir = rng.uniform() * 6.283185307179586;
        s.trajectory = Trajectory::linear(speed * std::cos(dir), speed * std::sin(dir));
        margin += speed * n_frames;
    }
    margin = std::min(margin, resolution * 0.45);
    s.cx = rng.uniform(margin, resolution - margin);
    s.cy = rng.uniform(margin, resolution - margin);
    // keep the whole trajectory inside bounds
    for (int i = 0; i < n_frames; ++i) {
        const auto [ox, oy] = s.trajectory.offset(i);
        s.cx = std::clamp(s.cx, s.size + 2.0 - std::min(0.0, ox),
                          resolution - 3.0 - s.size - std::max(0.0, ox));
        s.cy = std::clamp(s.cy, s.size + 2.0 - std::min(0.0, oy),
                          resolution - 3.0 - s.size - std::max(0.0, oy));
    }
    spec.shapes.push_back(s);
    return spec;
}

struct CorpusExample {
    TrainExample sample;
    std::string color;
    std::string shape;
};

// Single-frame scenes: the training corpus for the toy denoiser and the
// attribute classifier.
inline std::vector<CorpusExample> generate_corpus(int n_clips, uint64_t seed, int resolution = 64) {
    VIDEDIT_CHECK(n_clips > 0, ParameterError, "generate_corpus: n_clips must be positive");
    Rng rng(seed);
    std::vector<CorpusExample> out;
    out.reserve(static_cast<size_t>(n_clips));
    for (int i = 0; i < n_clips; ++i) {
        const SceneSpec spec = random_scene(i, resolution, 1, rng, false);
        VideoClip clip = generate_clip(spec);
        CorpusExample ex;
        ex.sample.image = std::move(clip.frames[0]);
        ex.sample.depth = std::move(clip.depths[0]);
        ex.sample.caption = spec.caption();
        ex.color = spec.shapes[0].color;
        ex.shape = to_string(spec.shapes[0].kind);
        out.push_back(std::move(ex));
    }
    return out;
}

inline ToyDataset corpus_to_dataset(const std::vector<CorpusExample>& corpus) {
    ToyDataset ds;
    ds.reserve(corpus.size());
    for (const auto& ex : corpus) ds.push_back(ex.sample);
    return ds;
}

// The pinned fixtures used by the acceptance runs: a moving shape over a
// textured background, linear by default, circular for the rotational one.
inline SceneSpec standard_fixture(uint64_t seed, int n_frames = 8, int resolution = 64,
                                  bool rotational = false) {
    Rng rng(seed ^ 0xf1d7);
    SceneSpec spec;
    spec.resolution = resolution;
    spec.n_frames = n_frames;
    spec.seed = seed;
    spec.background = corpus_backgrounds()[static_cast<size_t>(
        rng.below(static_cast<int64_t>(corpus_backgrounds().size())))];
    spec.texture_id = static_cast<int>(rng.below(3));
    spec.texture_amp = 0.22;

    ShapeSpec s;
    s.kind = ShapeKind::kCircle;
    s.color = "red";
    s.size = resolution * 0.18;
    s.cx = resolution * 0.42;
    s.cy = resolution * 0.5 + rng.uniform(-2.0, 2.0);
    if (rotational) {
        s.trajectory = Trajectory::circular(resolution * 0.09, 0.55, rng.uniform(0.0, 6.28));
        s.cx = resolution * 0.5;
        s.cy = resolution * 0.5;
    } else {
        s.trajectory = Trajectory::linear(1.1 + 0.2 * rng.uniform(), 0.35 * rng.uniform());
    }
    spec.shapes.push_back(s);
    return spec;
}

}  // namespace videdit
