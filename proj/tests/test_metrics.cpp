#include <catch2/catch_amalgamated.hpp>

#include "videdit/metrics.hpp"
#include "videdit/synth.hpp"

using namespace videdit;

namespace {

Tensor textured_image(int res, uint64_t seed) {
    Rng rng(seed);
    return synth_detail::background_texture(res, 1, 0.6, {0.0, 0.1, -0.1}, seed);
}

}  // namespace

TEST_CASE("zero flow warp is the exact identity") {
    const Tensor img = textured_image(24, 3);
    FlowField ff;
    ff.flow = Tensor::zeros({2, 24, 24});
    const auto wr = warp(img, ff);
    CHECK(max_abs_diff(wr.image, img) == 0.0);
    for (int64_t i = 0; i < wr.mask.numel(); ++i) CHECK(wr.mask[i] == 1.0);
}

TEST_CASE("integer translation warp equals the shifted image on the valid region") {
    const int res = 16;
    const Tensor img = textured_image(res, 4);
    FlowField ff;
    ff.flow = Tensor::zeros({2, res, res});
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) ff.flow.at(0, y, x) = 2.0;  // +2 in x
    const auto wr = warp(img, ff);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            if (x < 2) {
                CHECK(wr.mask.at(0, y, x) == 0.0);  // out of bounds
            } else {
                REQUIRE(wr.mask.at(0, y, x) == 1.0);
                for (int c = 0; c < 3; ++c)
                    CHECK(wr.image.at(c, y, x) == Catch::Approx(img.at(c, y, x - 2)).margin(1e-12));
            }
        }
}

TEST_CASE("warp rejects shape mismatch") {
    const Tensor img = textured_image(16, 5);
    FlowField ff;
    ff.flow = Tensor::zeros({2, 16, 18});
    CHECK_THROWS_AS(warp(img, ff), ShapeError);
}

TEST_CASE("pixel_mse trivial values") {
    const Tensor img = textured_image(16, 6);
    FlowField zero;
    zero.flow = Tensor::zeros({2, 16, 16});

    SECTION("static clip scores zero") {
        CHECK(pixel_mse({img, img, img}, {zero, zero}) == 0.0);
    }
    SECTION("constant +1 display-level shift scores one") {
        Tensor brighter = img;
        // one display unit = 1/127.5 in signed space; keep values in range
        for (int64_t i = 0; i < brighter.numel(); ++i)
            brighter[i] = std::clamp(brighter[i], -0.9, 0.9) + 1.0 / 127.5;
        Tensor base = img;
        for (int64_t i = 0; i < base.numel(); ++i) base[i] = std::clamp(base[i], -0.9, 0.9);
        CHECK(pixel_mse({base, brighter}, {zero}) == Catch::Approx(1.0).epsilon(1e-9));
    }
    SECTION("length mismatch is rejected") {
        CHECK_THROWS_AS(pixel_mse({img, img}, {}), ParameterError);
        CHECK_THROWS_AS(pixel_mse({img}, {}), ParameterError);
    }
}

TEST_CASE("frame_similarity trivial values") {
    const Tensor img = textured_image(16, 7);
    const auto backend = toy_embedding_backend();
    CHECK(frame_similarity({img, img, img}, backend) == Catch::Approx(1.0).margin(1e-12));

    Tensor neg = img;
    for (int64_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
    CHECK(frame_similarity({img, neg}, backend) == Catch::Approx(-1.0).margin(1e-9));

    CHECK_THROWS_AS(frame_similarity({img}, backend), ParameterError);
}

TEST_CASE("toy embedder is invariant to positive affine rescaling") {
    const Tensor img = textured_image(32, 8);
    const auto backend = toy_embedding_backend();
    const Tensor e = backend.embed_image(img);

    double n = 0.0;
    for (int64_t i = 0; i < e.numel(); ++i) n += e[i] * e[i];
    CHECK(n == Catch::Approx(1.0).margin(1e-9));  // unit norm

    Tensor scaled = img;
    for (int64_t i = 0; i < scaled.numel(); ++i) scaled[i] = 0.4 * scaled[i] + 0.2;
    const Tensor e2 = backend.embed_image(scaled);
    CHECK(max_abs_diff(e, e2) < 1e-9);
}

TEST_CASE("block matching recovers a global shift") {
    const int res = 32;
    const Tensor f1 = textured_image(res, 9);
    Tensor f2({3, res, res});
    // shift content right by 3: f2(x) = f1(x - 3)
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x)
                f2.at(c, y, x) = f1.at(c, y, std::clamp(x - 3, 0, res - 1));

    SECTION("identical frames give zero flow") {
        const auto ff = block_matching_flow(f1, f1, 8, 4);
        CHECK(max_abs_diff(ff.flow, Tensor::zeros(ff.flow.shape())) == 0.0);
    }
    SECTION("shifted frames give the shift on interior blocks") {
        const auto ff = block_matching_flow(f1, f2, 8, 4);
        int good = 0, total = 0;
        for (int y = 8; y < res - 8; ++y)
            for (int x = 8; x < res - 8; ++x) {
                ++total;
                const double ex = ff.flow.at(0, y, x) - 3.0;
                const double ey = ff.flow.at(1, y, x);
                if (std::hypot(ex, ey) < 1.0) ++good;
            }
        // endpoint error < 1 px on at least 90% of interior pixels
        CHECK(static_cast<double>(good) / total >= 0.9);
    }
    SECTION("bad parameters rejected") {
        CHECK_THROWS_AS(block_matching_flow(f1, f2, 8, 0), ParameterError);
        CHECK_THROWS_AS(block_matching_flow(f1, Tensor::zeros({3, 16, 16}), 8, 2), ShapeError);
    }
}

TEST_CASE("block matching flow vs synthetic ground truth") {
    SceneSpec spec = standard_fixture(17, 2, 64);
    spec.texture_amp = 0.3;
    const VideoClip clip = generate_clip(spec);
    const auto est = block_matching_flow(clip.frames[0], clip.frames[1], 8, 4);
    const auto& gt = clip.flows[0];
    int good = 0, total = 0;
    for (int y = 4; y < 60; ++y)
        for (int x = 4; x < 60; ++x) {
            if (!gt.valid_at(y, x) || est.mask.at(0, y, x) < 0.5) continue;
            ++total;
            const double ex = est.flow.at(0, y, x) - gt.flow.at(0, y, x);
            const double ey = est.flow.at(1, y, x) - gt.flow.at(1, y, x);
            if (std::hypot(ex, ey) < 1.0) ++good;
        }
    REQUIRE(total > 0);
    CHECK(static_cast<double>(good) / total >= 0.9);
}

TEST_CASE("attribute classifier learns the synthetic attributes") {
    const auto corpus = generate_corpus(240, 21, 64);
    AttributeClassifier clf(77);
    clf.train(corpus, 500, 5);

    // held-out scenes
    const auto held = generate_corpus(36, 99, 64);
    double color_acc = 0.0, shape_acc = 0.0;
    for (const auto& ex : held) {
        const auto sc = clf.score_frames({ex.sample.image}, ex.color, ex.shape);
        color_acc += sc.color_score;
        shape_acc += sc.shape_score;
    }
    color_acc /= static_cast<double>(held.size());
    shape_acc /= static_cast<double>(held.size());
    INFO("held-out color acc " << color_acc << " shape acc " << shape_acc);
    CHECK(color_acc >= 0.9);
    CHECK(shape_acc >= 0.9);

    // prompt_fidelity wiring
    const VideoClip red_clip = generate_clip(standard_fixture(31, 3, 32));
    const double same = prompt_fidelity(red_clip.frames, "red circle", clf);
    const double other = prompt_fidelity(red_clip.frames, "blue square", clf);
    CHECK(same >= 0.9);
    CHECK(other <= 0.1);
    CHECK_THROWS_AS(prompt_fidelity(red_clip.frames, "nothing here", clf), ParameterError);
}

TEST_CASE("noise monotonicity: pixel_mse rises and similarity falls") {
    SceneSpec spec = standard_fixture(23, 4, 32);
    const VideoClip clip = generate_clip(spec);
    double last_mse = -1.0, last_sim = 2.0;
    for (const double level : {0.0, 0.08, 0.25}) {
        Rng rng(900);
        std::vector<Tensor> noisy;
        for (const auto& f : clip.frames) {
            Tensor n = f;
            for (int64_t i = 0; i < n.numel(); ++i) n[i] += level * rng.normal();
            noisy.push_back(std::move(n));
        }
        const double m = pixel_mse(noisy, clip.flows);
        const double s = frame_similarity(noisy, toy_embedding_backend());
        INFO("noise " << level << " mse " << m << " sim " << s);
        CHECK(m > last_mse);
        CHECK(s < last_sim);
        last_mse = m;
        last_sim = s;
    }
}
