#include <catch2/catch_amalgamated.hpp>

#include "videdit/denoiser.hpp"
#include "videdit/training.hpp"

using namespace videdit;

namespace {

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.image_size = 16;
    c.base_channels = 8;
    c.text_dim = 12;
    c.time_dim = 24;
    return c;
}

ConditioningBundle cond_for(const Denoiser& model, const std::string& prompt, double scale = 1.0) {
    const int s = model.config().image_size;
    return {model.embed_prompt(prompt), Tensor::full({1, s, s}, 0.5), scale};
}

}  // namespace

TEST_CASE("prompt embedding determinism and null handling") {
    Denoiser model(small_config(), 7);
    const Tensor a = model.embed_prompt("red circle");
    const Tensor b = model.embed_prompt("red circle");
    CHECK(a.same_shape(b));
    CHECK(max_abs_diff(a, b) == 0.0);

    const Tensor null_tok = model.embed_prompt("");
    CHECK(null_tok.dim(0) == 1);

    const Tensor blue = model.embed_prompt("blue circle");
    CHECK(max_abs_diff(a, blue) > 1e-6);

    // unknown words fall back to the UNK row rather than failing
    const Tensor unk = model.embed_prompt("xyzzy circle");
    CHECK(unk.dim(0) == 2);

    CHECK_THROWS_AS(model.embed_prompt("a a a a a a a a a"), ParameterError);
}

TEST_CASE("denoise output shape and errors") {
    Denoiser model(small_config(), 7);
    const int s = model.config().image_size;
    Rng rng(1);
    const Tensor x = Tensor::randn({3, s, s}, rng);
    AttentionControl vanilla;
    const auto [eps, captured] = model.denoise(x, 500, cond_for(model, "red circle"), vanilla);
    CHECK(eps.same_shape(x));
    CHECK(captured.empty());

    const Tensor bad = Tensor::randn({3, s, s + 4}, rng);
    CHECK_THROWS_AS(model.denoise(bad, 500, cond_for(model, "red circle"), vanilla), ShapeError);

    AttentionControl out_of_range;
    out_of_range.mode = AttentionMode::kCapture;
    out_of_range.capture_layers = {17};
    CHECK_THROWS_AS(model.denoise(x, 500, cond_for(model, "red circle"), out_of_range),
                    ParameterError);

    AttentionControl empty_inject;
    empty_inject.mode = AttentionMode::kInject;
    empty_inject.inject_layers = {8};
    CHECK_THROWS_AS(model.denoise(x, 500, cond_for(model, "red circle"), empty_inject),
                    ParameterError);
}

TEST_CASE("capture over the decoder yields nine feature maps and does not perturb eps") {
    Denoiser model(small_config(), 7);
    const int s = model.config().image_size;
    Rng rng(2);
    const Tensor x = Tensor::randn({3, s, s}, rng);
    const auto cond = cond_for(model, "red circle");

    AttentionControl vanilla;
    const auto [eps_v, cap_v] = model.denoise(x, 300, cond, vanilla);

    AttentionControl capture;
    capture.mode = AttentionMode::kCapture;
    capture.capture_layers = decoder_layers();
    const auto [eps_c, cap_c] = model.denoise(x, 300, cond, capture);

    CHECK(cap_c.size() == 9);
    // hook fidelity: capture must not change the computation at all
    CHECK(max_abs_diff(eps_v, eps_c) == 0.0);
}

TEST_CASE("self-injection reduces to vanilla self-attention") {
    Denoiser model(small_config(), 7);
    const int s = model.config().image_size;
    Rng rng(3);
    const Tensor x = Tensor::randn({3, s, s}, rng);
    const auto cond = cond_for(model, "red circle");

    AttentionControl capture;
    capture.mode = AttentionMode::kCapture;
    capture.capture_layers = all_layers();
    const auto [eps_v, own] = model.denoise(x, 700, cond, capture);

    AttentionControl inject;
    inject.mode = AttentionMode::kInject;
    inject.inject_layers = all_layers();
    for (const auto& [l, f] : own) inject.injected_features[l] = {f};
    const auto [eps_i, cap_i] = model.denoise(x, 700, cond, inject);

    CHECK(max_abs_diff(eps_v, eps_i) < 1e-5);
    // and much tighter in double precision
    CHECK(max_abs_diff(eps_v, eps_i) < 1e-12);
}

TEST_CASE("injection locality: untouched layers see identical activations") {
    Denoiser model(small_config(), 7);
    const int s = model.config().image_size;
    Rng rng(4);
    const Tensor x = Tensor::randn({3, s, s}, rng);
    const auto cond = cond_for(model, "red circle");

    // capture everything once to obtain feature shapes per layer
    AttentionControl capture;
    capture.mode = AttentionMode::kCapture;
    capture.capture_layers = all_layers();
    const auto [eps_v, own] = model.denoise(x, 100, cond, capture);

    // inject unrelated features into layer 16 only; layers 1..15 run before
    // it, so their captured features must be bitwise unchanged
    AttentionControl inject;
    inject.mode = AttentionMode::kInject;
    inject.inject_layers = {16};
    inject.capture_layers = all_layers();
    Rng rng2(5);
    inject.injected_features[16] = {Tensor::randn(own.at(16).shape(), rng2)};
    const auto [eps_i, cap_i] = model.denoise(x, 100, cond, inject);

    for (int l = 1; l <= 15; ++l) CHECK(max_abs_diff(own.at(l), cap_i.at(l)) == 0.0);
    CHECK(max_abs_diff(eps_v, eps_i) > 0.0);  // layer 16 did change the output
}

TEST_CASE("guidance scale 1 equals the conditional branch") {
    Denoiser model(small_config(), 7);
    const int s = model.config().image_size;
    Rng rng(6);
    const Tensor x = Tensor::randn({3, s, s}, rng);
    AttentionControl vanilla;

    const auto [eps1, c1] = model.denoise(x, 400, cond_for(model, "red circle", 1.0), vanilla);
    const auto [eps75, c2] = model.denoise(x, 400, cond_for(model, "red circle", 7.5), vanilla);
    // scale 7.5 runs the null branch too; outputs must differ on a random net
    CHECK(max_abs_diff(eps1, eps75) > 0.0);

    CHECK_THROWS_AS(model.denoise(x, 400, cond_for(model, "red circle", 0.5), vanilla),
                    ParameterError);
}

TEST_CASE("weight archive round trip preserves behavior") {
    Denoiser model(small_config(), 7);
    const int s = model.config().image_size;
    Rng rng(8);
    const Tensor x = Tensor::randn({3, s, s}, rng);
    const auto cond = cond_for(model, "green square");
    AttentionControl vanilla;
    const auto [eps_a, ca] = model.denoise(x, 250, cond, vanilla);

    const std::string path = "test_weights_roundtrip.bin";
    DenoiserIo::save(model, path);
    Denoiser loaded = DenoiserIo::load(path);
    CHECK(loaded.config() == model.config());
    const ConditioningBundle cond2{loaded.embed_prompt("green square"), cond.depth, 1.0};
    const auto [eps_b, cb] = loaded.denoise(x, 250, cond2, vanilla);
    CHECK(max_abs_diff(eps_a, eps_b) == 0.0);
    std::remove(path.c_str());
}

TEST_CASE("one training step decreases nothing catastrophically and stays finite") {
    Denoiser model(small_config(), 9);
    const int s = model.config().image_size;
    Rng rng(10);
    ToyDataset ds;
    TrainExample ex;
    ex.image = Tensor::randn({3, s, s}, rng, 0.5);
    ex.caption = "red circle on gray";
    ex.depth = Tensor::full({1, s, s}, 0.7);
    ds.push_back(ex);

    const auto sched = make_schedule(1000, 50, 1e-4, 2e-2, 0.0);
    TrainOptions opt;
    opt.steps = 1;
    opt.batch_size = 1;
    const auto report = train_toy(model, ds, sched, opt);
    REQUIRE(report.losses.size() == 1);
    CHECK(std::isfinite(report.losses[0]));

    CHECK_THROWS_AS(train_toy(model, {}, sched, opt), ParameterError);
}

TEST_CASE("short training run reduces the loss on a tiny corpus") {
    Denoiser model(small_config(), 11);
    const int s = model.config().image_size;
    Rng rng(12);
    ToyDataset ds;
    for (int i = 0; i < 4; ++i) {
        TrainExample ex;
        ex.image = Tensor::randn({3, s, s}, rng, 0.6);
        ex.caption = i % 2 == 0 ? "red circle on gray" : "blue square on tan";
        ex.depth = Tensor::full({1, s, s}, 0.4);
        ds.push_back(ex);
    }
    const auto sched = make_schedule(1000, 50, 1e-4, 2e-2, 0.0);
    TrainOptions opt;
    opt.steps = 120;
    opt.batch_size = 1;
    opt.lr = 2e-3;
    opt.seed = 3;
    const auto report = train_toy(model, ds, sched, opt);
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 20; ++i) {
        first += report.losses[static_cast<size_t>(i)];
        last += report.losses[report.losses.size() - 20 + static_cast<size_t>(i)];
    }
    CHECK(last < first);
}
