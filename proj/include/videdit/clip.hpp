#pragma once

#include <string>
#include <vector>

#include "videdit/tensor.hpp"

namespace videdit {

// Dense optical flow between a frame and its successor. Channel 0 holds the
// x displacement (columns), channel 1 the y displacement (rows), in pixels.
// An empty mask means every pixel is valid; otherwise mask is [1, H, W] with
// values in {0, 1}.
struct FlowField {
    Tensor flow;  // [2, H, W]
    Tensor mask;  // [1, H, W] or empty

    int height() const { return flow.dim(1); }
    int width() const { return flow.dim(2); }

    bool valid_at(int y, int x) const {
        return mask.empty() || mask.at(0, y, x) > 0.5;
    }
};

// A clip: frames in [-1, 1] pixel space, per-frame depth in [0, 1], and
// optionally the ground-truth flow between consecutive frames.
struct VideoClip {
    std::vector<Tensor> frames;      // each [3, H, W]
    std::vector<Tensor> depths;      // each [1, H, W]
    std::vector<FlowField> flows;    // size n-1 when present, else empty
    std::string source_prompt;
    double fps = 8.0;

    int n_frames() const { return static_cast<int>(frames.size()); }
    int height() const { return frames.empty() ? 0 : frames[0].dim(1); }
    int width() const { return frames.empty() ? 0 : frames[0].dim(2); }

    void validate() const {
        VIDEDIT_CHECK(!frames.empty(), ParameterError, "clip has no frames");
        VIDEDIT_CHECK(depths.size() == frames.size(), ShapeError,
                      "clip depth count does not match frame count");
        for (const auto& f : frames)
            VIDEDIT_CHECK(f.ndim() == 3 && f.dim(0) == 3 && f.dim(1) == height() &&
                              f.dim(2) == width(),
                          ShapeError, "clip frames must share one [3, H, W] shape");
        for (const auto& d : depths)
            VIDEDIT_CHECK(d.ndim() == 3 && d.dim(0) == 1 && d.dim(1) == height() &&
                              d.dim(2) == width(),
                          ShapeError, "clip depths must be [1, H, W]");
        if (!flows.empty()) {
            VIDEDIT_CHECK(flows.size() + 1 == frames.size(), ShapeError,
                          "clip must carry n-1 flow fields");
            for (const auto& fl : flows)
                VIDEDIT_CHECK(fl.flow.ndim() == 3 && fl.flow.dim(0) == 2 &&
                                  fl.flow.dim(1) == height() && fl.flow.dim(2) == width(),
                              ShapeError, "flow fields must be [2, H, W]");
        }
    }
};

// 0..255 display scale used by the pixel metrics and the image files.
inline double to_display(double v) { return (v + 1.0) * 127.5; }
inline double from_display(double v) { return v / 127.5 - 1.0; }

inline void clamp_signed_unit(Tensor& t) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = std::clamp(t[i], -1.0, 1.0);
}

}  // namespace videdit
