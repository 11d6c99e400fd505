#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "videdit/io.hpp"
#include "videdit/synth.hpp"

using namespace videdit;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("f32 array files are a fixed point after one quantization") {
    TempDir tmp("videdit_io_arr");
    Rng rng(1);
    const Tensor t = Tensor::randn({2, 5, 3}, rng);
    const fs::path p1 = tmp.path / "a.f32";
    const fs::path p2 = tmp.path / "b.f32";
    save_array_f32(p1, t);
    const Tensor once = load_array_f32(p1);
    CHECK(once.shape() == t.shape());
    CHECK(max_abs_diff(once, t) < 1e-6);  // single f32 quantization
    save_array_f32(p2, once);
    const Tensor twice = load_array_f32(p2);
    CHECK(max_abs_diff(once, twice) == 0.0);       // bit-identical values
    CHECK(read_bytes(p1) == read_bytes(p2));       // byte-identical files
}

TEST_CASE("ppm round trip preserves quantized pixels") {
    TempDir tmp("videdit_io_ppm");
    Rng rng(2);
    Tensor img = Tensor::randn({3, 9, 7}, rng, 0.5);
    clamp_signed_unit(img);
    const fs::path p = tmp.path / "img.ppm";
    save_ppm(p, img);
    const Tensor back = load_ppm(p);
    CHECK(back.shape() == img.shape());
    CHECK(max_abs_diff(back, img) <= 0.5 / 127.5);  // u8 rounding bound
    save_ppm(tmp.path / "img2.ppm", back);
    CHECK(read_bytes(p) == read_bytes(tmp.path / "img2.ppm"));
}

TEST_CASE("clip directory round trip") {
    TempDir tmp("videdit_io_clip");
    const VideoClip clip = generate_clip(standard_fixture(7, 4, 32));
    write_clip(tmp.path / "clip", clip, 7);
    const VideoClip back = read_clip(tmp.path / "clip");
    CHECK(back.n_frames() == clip.n_frames());
    CHECK(back.source_prompt == clip.source_prompt);
    REQUIRE(back.flows.size() == clip.flows.size());
    for (int i = 0; i < clip.n_frames(); ++i) {
        CHECK(max_abs_diff(back.frames[static_cast<size_t>(i)],
                           clip.frames[static_cast<size_t>(i)]) <= 0.5 / 127.5);
        CHECK(max_abs_diff(back.depths[static_cast<size_t>(i)],
                           clip.depths[static_cast<size_t>(i)]) < 1e-6);
    }
    for (size_t i = 0; i < clip.flows.size(); ++i) {
        CHECK(max_abs_diff(back.flows[i].flow, clip.flows[i].flow) < 1e-6);
        CHECK(max_abs_diff(back.flows[i].mask, clip.flows[i].mask) == 0.0);
    }

    SECTION("missing depth is a descriptive error, not a fallback") {
        fs::remove(tmp.path / "clip" / "depth" / "depth_0002.f32");
        CHECK_THROWS_AS(read_clip(tmp.path / "clip"), IoError);
    }
}

TEST_CASE("run config serialize -> parse -> serialize is a fixed point") {
    RunConfig c;
    c.delta = 42.5;
    c.policy = "anchor_only";
    c.inject_layers = "8,9,10";
    c.seed = 99;
    c.cfg_scale_edit = 5.0;
    c.weights_path = "w.bin";
    const auto j1 = to_json(c);
    const RunConfig parsed = run_config_from_json(j1);
    const auto j2 = to_json(parsed);
    CHECK(j1 == j2);

    // defaults carry the method constants
    RunConfig d;
    CHECK(d.num_inference_steps == 50);
    CHECK(d.delta == 100.0);
    CHECK(d.active_steps == 25);
    CHECK(d.anchor_index == 1);
    CHECK(d.layer_set() == decoder_layers());
}

TEST_CASE("invalid configs fail fast") {
    RunConfig c;
    c.active_steps = 60;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RunConfig{};
    c.policy = "bogus";
    CHECK_THROWS_AS(c.validate(), ParameterError);
    c = RunConfig{};
    c.inject_layers = "17";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = RunConfig{};
    c.cfg_scale_edit = 0.5;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("latents persistence round trip with key matching") {
    TempDir tmp("videdit_io_lat");
    Rng rng(3);
    std::vector<LatentFrame> lats;
    for (int i = 0; i < 3; ++i) lats.push_back({Tensor::randn({3, 8, 8}, rng), i + 1, 0});
    const auto sched = make_schedule(1000, 50, 1e-4, 2e-2, 0.0);
    const LatentsKey key{"abc", "def", "123"};
    save_latents(tmp.path / "lat", lats, key, sched);
    CHECK(latents_match(tmp.path / "lat", key));
    CHECK_FALSE(latents_match(tmp.path / "lat", LatentsKey{"abc", "def", "999"}));
    CHECK_FALSE(latents_match(tmp.path / "nope", key));

    const auto back = load_latents(tmp.path / "lat");
    REQUIRE(back.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(back[i].frame_index == static_cast<int>(i) + 1);
        CHECK(max_abs_diff(back[i].data, lats[i].data) < 1e-6);
    }

    // persisted latents are a fixed point after the first f32 quantization
    save_latents(tmp.path / "lat2", back, key, sched);
    const auto back2 = load_latents(tmp.path / "lat2");
    for (size_t i = 0; i < 3; ++i) CHECK(max_abs_diff(back[i].data, back2[i].data) == 0.0);
}

TEST_CASE("array format layout is stable") {
    TempDir tmp("videdit_io_fmt");
    Tensor t({1, 2}, {1.0, -2.0});
    const fs::path p = tmp.path / "t.f32";
    save_array_f32(p, t);
    const std::string bytes = read_bytes(p);
    REQUIRE(bytes.size() > 16);
    CHECK(bytes.substr(0, 8) == std::string("VDARR01\n"));
    uint64_t hlen = 0;
    std::memcpy(&hlen, bytes.data() + 8, 8);
    CHECK(bytes.size() == 16 + hlen + 2 * 4);
    const auto header = nlohmann::json::parse(bytes.substr(16, hlen));
    CHECK(header.at("dtype") == "f32");
    CHECK(header.at("shape") == std::vector<int>({1, 2}));
    float v0 = 0.0f, v1 = 0.0f;
    std::memcpy(&v0, bytes.data() + 16 + hlen, 4);
    std::memcpy(&v1, bytes.data() + 16 + hlen + 4, 4);
    CHECK(v0 == 1.0f);
    CHECK(v1 == -2.0f);
}
