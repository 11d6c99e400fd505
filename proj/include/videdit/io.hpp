#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "videdit/clip.hpp"
#include "videdit/pipeline.hpp"
#include "videdit/schedule.hpp"
#include "videdit/tensor.hpp"

namespace videdit {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// binary array format: 8-byte magic "VDARR01\n", u64 little-endian header
// length, JSON header {"dtype":"f32","shape":[...]}, then the payload as
// little-endian 32-bit floats in row-major order.

inline constexpr char kArrayMagic[8] = {'V', 'D', 'A', 'R', 'R', '0', '1', '\n'};

inline void save_array_f32(const fs::path& path, const Tensor& t) {
    json header;
    header["dtype"] = "f32";
    header["shape"] = t.shape();
    const std::string hs = header.dump();
    std::ofstream out(path, std::ios::binary);
    VIDEDIT_CHECK(out.good(), IoError, "cannot write array file: " + path.string());
    out.write(kArrayMagic, 8);
    const uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), 8);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    std::vector<float> payload(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) payload[static_cast<size_t>(i)] = static_cast<float>(t[i]);
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * 4));
    VIDEDIT_CHECK(out.good(), IoError, "failed writing array file: " + path.string());
}

inline Tensor load_array_f32(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    VIDEDIT_CHECK(in.good(), IoError, "cannot open array file: " + path.string());
    char magic[8];
    in.read(magic, 8);
    VIDEDIT_CHECK(in.good() && std::memcmp(magic, kArrayMagic, 8) == 0, IoError,
                  "not an array file: " + path.string());
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    const json header = json::parse(hs);
    VIDEDIT_CHECK(header.at("dtype") == "f32", IoError, "unsupported array dtype");
    const std::vector<int> shape = header.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    std::vector<float> payload(static_cast<size_t>(t.numel()));
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * 4));
    VIDEDIT_CHECK(in.good(), IoError, "truncated array file: " + path.string());
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = payload[static_cast<size_t>(i)];
    return t;
}

// ---------------------------------------------------------------------------
// 8-bit PPM (P6) frames

inline uint8_t to_u8(double v) {
    const double d = std::lround(std::clamp(to_display(v), 0.0, 255.0));
    return static_cast<uint8_t>(d);
}

inline void save_ppm(const fs::path& path, const Tensor& img) {
    VIDEDIT_CHECK(img.ndim() == 3 && img.dim(0) == 3, ShapeError, "save_ppm: expects [3,H,W]");
    const int h = img.dim(1), w = img.dim(2);
    std::ofstream out(path, std::ios::binary);
    VIDEDIT_CHECK(out.good(), IoError, "cannot write image: " + path.string());
    out << "P6\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)] = to_u8(img.at(c, y, x));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    VIDEDIT_CHECK(out.good(), IoError, "failed writing image: " + path.string());
}

inline Tensor load_ppm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    VIDEDIT_CHECK(in.good(), IoError, "cannot open image: " + path.string());
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    VIDEDIT_CHECK(magic == "P6" && maxval == 255 && w > 0 && h > 0, IoError,
                  "unsupported PPM file: " + path.string());
    in.get();  // single whitespace after the header
    Tensor img({3, h, w});
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) =
                    from_display(row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)]);
    }
    VIDEDIT_CHECK(in.good(), IoError, "truncated PPM file: " + path.string());
    return img;
}

// ---------------------------------------------------------------------------
// clip directory: frames/frame_####.ppm, depth/depth_####.f32,
// flow/flow_####.f32 (+ flow/mask_####.f32 when a validity mask exists),
// meta.json

inline std::string zero_pad(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", i);
    return buf;
}

inline void write_clip(const fs::path& dir, const VideoClip& clip, uint64_t seed = 0) {
    clip.validate();
    fs::create_directories(dir / "frames");
    fs::create_directories(dir / "depth");
    if (!clip.flows.empty()) fs::create_directories(dir / "flow");
    for (int i = 0; i < clip.n_frames(); ++i) {
        save_ppm(dir / "frames" / ("frame_" + zero_pad(i) + ".ppm"),
                 clip.frames[static_cast<size_t>(i)]);
        save_array_f32(dir / "depth" / ("depth_" + zero_pad(i) + ".f32"),
                       clip.depths[static_cast<size_t>(i)]);
    }
    for (size_t i = 0; i < clip.flows.size(); ++i) {
        save_array_f32(dir / "flow" / ("flow_" + zero_pad(static_cast<int>(i)) + ".f32"),
                       clip.flows[i].flow);
        if (!clip.flows[i].mask.empty())
            save_array_f32(dir / "flow" / ("mask_" + zero_pad(static_cast<int>(i)) + ".f32"),
                           clip.flows[i].mask);
    }
    json meta;
    meta["resolution"] = clip.height();
    meta["n_frames"] = clip.n_frames();
    meta["source_prompt"] = clip.source_prompt;
    meta["fps"] = clip.fps;
    meta["seed"] = seed;
    std::ofstream out(dir / "meta.json");
    out << meta.dump(2) << "\n";
    VIDEDIT_CHECK(out.good(), IoError, "failed writing meta.json");
}

inline VideoClip read_clip(const fs::path& dir) {
    VIDEDIT_CHECK(fs::exists(dir / "meta.json"), IoError,
                  "not a clip directory (missing meta.json): " + dir.string());
    std::ifstream meta_in(dir / "meta.json");
    const json meta = json::parse(meta_in);
    const int n = meta.at("n_frames").get<int>();
    const int res = meta.at("resolution").get<int>();

    VideoClip clip;
    clip.source_prompt = meta.value("source_prompt", "");
    clip.fps = meta.value("fps", 8.0);
    for (int i = 0; i < n; ++i) {
        const fs::path fp = dir / "frames" / ("frame_" + zero_pad(i) + ".ppm");
        VIDEDIT_CHECK(fs::exists(fp), IoError, "missing frame file: " + fp.string());
        clip.frames.push_back(load_ppm(fp));
        const fs::path dp = dir / "depth" / ("depth_" + zero_pad(i) + ".f32");
        VIDEDIT_CHECK(fs::exists(dp), IoError,
                      "missing depth file (no silent zero-depth fallback): " + dp.string());
        clip.depths.push_back(load_array_f32(dp));
    }
    for (int i = 0; i + 1 < n; ++i) {
        const fs::path fp = dir / "flow" / ("flow_" + zero_pad(i) + ".f32");
        if (!fs::exists(fp)) break;
        FlowField ff;
        ff.flow = load_array_f32(fp);
        const fs::path mp = dir / "flow" / ("mask_" + zero_pad(i) + ".f32");
        if (fs::exists(mp)) ff.mask = load_array_f32(mp);
        clip.flows.push_back(std::move(ff));
    }
    if (!clip.flows.empty())
        VIDEDIT_CHECK(clip.flows.size() + 1 == clip.frames.size(), IoError,
                      "clip directory has an inconsistent flow count");
    VIDEDIT_CHECK(clip.height() == res, IoError, "meta.json resolution does not match files");
    clip.validate();
    return clip;
}

inline uint64_t clip_hash(const VideoClip& clip) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& f : clip.frames) {
        std::vector<uint8_t> bytes;
        bytes.reserve(static_cast<size_t>(f.numel()));
        for (int64_t i = 0; i < f.numel(); ++i) bytes.push_back(to_u8(f[i]));
        h = fnv1a(bytes.data(), bytes.size(), h);
    }
    for (const auto& d : clip.depths) {
        std::vector<float> fl(static_cast<size_t>(d.numel()));
        for (int64_t i = 0; i < d.numel(); ++i) fl[static_cast<size_t>(i)] = static_cast<float>(d[i]);
        h = fnv1a(fl.data(), fl.size() * 4, h);
    }
    return h;
}

inline uint64_t schedule_hash(const DiffusionSchedule& s) {
    uint64_t h = fnv1a(&s.num_train_steps, sizeof(int));
    h = fnv1a(&s.num_inference_steps, sizeof(int), h);
    h = fnv1a(&s.eta, sizeof(double), h);
    h = fnv1a(s.alpha_bar.data(), s.alpha_bar.size() * sizeof(double), h);
    return h;
}

// ---------------------------------------------------------------------------
// inverted-latent persistence, keyed by (clip, weights, schedule)

struct LatentsKey {
    std::string clip_hash;
    std::string weights_hash;
    std::string schedule_hash;

    bool operator==(const LatentsKey&) const = default;
};

inline void save_latents(const fs::path& dir, const std::vector<LatentFrame>& latents,
                         const LatentsKey& key, const DiffusionSchedule& sched) {
    fs::create_directories(dir);
    json meta;
    meta["clip_hash"] = key.clip_hash;
    meta["weights_hash"] = key.weights_hash;
    meta["schedule_hash"] = key.schedule_hash;
    meta["n_latents"] = latents.size();
    meta["schedule"] = {{"num_train_steps", sched.num_train_steps},
                        {"num_inference_steps", sched.num_inference_steps},
                        {"eta", sched.eta}};
    json shapes = json::array();
    for (const auto& l : latents) shapes.push_back(l.data.shape());
    meta["shapes"] = std::move(shapes);
    std::ofstream out(dir / "meta.json");
    out << meta.dump(2) << "\n";
    VIDEDIT_CHECK(out.good(), IoError, "failed writing latents meta.json");
    for (size_t i = 0; i < latents.size(); ++i)
        save_array_f32(dir / ("lat_" + zero_pad(static_cast<int>(i)) + ".f32"), latents[i].data);
}

inline bool latents_match(const fs::path& dir, const LatentsKey& key) {
    if (!fs::exists(dir / "meta.json")) return false;
    std::ifstream in(dir / "meta.json");
    json meta;
    try {
        meta = json::parse(in);
    } catch (...) {
        return false;
    }
    return meta.value("clip_hash", "") == key.clip_hash &&
           meta.value("weights_hash", "") == key.weights_hash &&
           meta.value("schedule_hash", "") == key.schedule_hash;
}

inline std::vector<LatentFrame> load_latents(const fs::path& dir) {
    std::ifstream in(dir / "meta.json");
    VIDEDIT_CHECK(in.good(), IoError, "cannot open latents meta.json in " + dir.string());
    const json meta = json::parse(in);
    const size_t n = meta.at("n_latents").get<size_t>();
    std::vector<LatentFrame> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        LatentFrame lf;
        lf.data = load_array_f32(dir / ("lat_" + zero_pad(static_cast<int>(i)) + ".f32"));
        lf.frame_index = static_cast<int>(i) + 1;
        lf.step_pos = 0;
        out.push_back(std::move(lf));
    }
    return out;
}

// ---------------------------------------------------------------------------
// run configuration

struct RunConfig {
    // schedule
    int num_train_steps = 1000;
    int num_inference_steps = 50;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    double eta = 0.0;
    // denoiser
    int image_size = 64;
    int base_channels = 10;
    int text_dim = 24;
    int time_dim = 48;
    std::string weights_path;
    // injection policy
    std::string policy = "anchor_plus_prev";
    int anchor_index = 1;
    std::string inject_layers = "decoder";  // "decoder", "all", or comma list
    // guidance
    double delta = 100.0;
    int active_steps = 25;
    std::string grad_method = "autodiff";
    bool normalize_guidance = false;
    // classifier-free guidance
    double cfg_scale_edit = 7.5;
    double cfg_scale_invert = 1.0;
    // run
    uint64_t seed = 0;
    std::string out_dir;

    DiffusionSchedule make_sched() const {
        return make_schedule(num_train_steps, num_inference_steps, beta_start, beta_end, eta);
    }

    DenoiserConfig denoiser_config() const {
        DenoiserConfig c;
        c.image_size = image_size;
        c.base_channels = base_channels;
        c.text_dim = text_dim;
        c.time_dim = time_dim;
        return c;
    }

    std::set<int> layer_set() const {
        if (inject_layers == "decoder") return decoder_layers();
        if (inject_layers == "all") return all_layers();
        std::set<int> out;
        std::stringstream ss(inject_layers);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            const int v = std::stoi(item);
            VIDEDIT_CHECK(v >= 1 && v <= DenoiserConfig::kNumBlocks, ConfigError,
                          "inject layer index out of range: " + item);
            out.insert(v);
        }
        VIDEDIT_CHECK(!out.empty(), ConfigError, "empty inject layer list");
        return out;
    }

    EditOptions edit_options() const {
        EditOptions o;
        o.policy.mode = injection_mode_from_string(policy);
        o.policy.anchor_index = anchor_index;
        o.policy.layers = layer_set();
        o.guidance.delta = delta;
        o.guidance.active_steps = active_steps;
        o.guidance.grad_method = grad_method_from_string(grad_method);
        o.guidance.normalize = normalize_guidance;
        o.edit_cfg_scale = cfg_scale_edit;
        o.invert_cfg_scale = cfg_scale_invert;
        o.seed = seed;
        return o;
    }

    // fail-fast validation of the cross-module invariants
    void validate() const {
        VIDEDIT_CHECK(anchor_index >= 1, ConfigError, "anchor_index must be >= 1");
        VIDEDIT_CHECK(delta >= 0.0, ConfigError, "delta must be >= 0");
        VIDEDIT_CHECK(active_steps >= 0 && active_steps <= num_inference_steps, ConfigError,
                      "active_steps must lie in [0, T]");
        VIDEDIT_CHECK(cfg_scale_edit >= 1.0 && cfg_scale_invert >= 1.0, ConfigError,
                      "CFG scales must be >= 1");
        (void)make_sched();
        denoiser_config().validate();
        (void)layer_set();
        (void)injection_mode_from_string(policy);
        (void)grad_method_from_string(grad_method);
    }
};

inline json to_json(const RunConfig& c) {
    return json{{"schedule",
                 {{"num_train_steps", c.num_train_steps},
                  {"num_inference_steps", c.num_inference_steps},
                  {"beta_start", c.beta_start},
                  {"beta_end", c.beta_end},
                  {"eta", c.eta}}},
                {"denoiser",
                 {{"image_size", c.image_size},
                  {"base_channels", c.base_channels},
                  {"text_dim", c.text_dim},
                  {"time_dim", c.time_dim},
                  {"weights_path", c.weights_path}}},
                {"injection",
                 {{"policy", c.policy}, {"anchor_index", c.anchor_index},
                  {"layers", c.inject_layers}}},
                {"guidance",
                 {{"delta", c.delta},
                  {"active_steps", c.active_steps},
                  {"grad_method", c.grad_method},
                  {"normalize", c.normalize_guidance}}},
                {"cfg", {{"edit", c.cfg_scale_edit}, {"invert", c.cfg_scale_invert}}},
                {"seed", c.seed},
                {"out_dir", c.out_dir}};
}

inline RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        c.num_train_steps = s.value("num_train_steps", c.num_train_steps);
        c.num_inference_steps = s.value("num_inference_steps", c.num_inference_steps);
        c.beta_start = s.value("beta_start", c.beta_start);
        c.beta_end = s.value("beta_end", c.beta_end);
        c.eta = s.value("eta", c.eta);
    }
    if (j.contains("denoiser")) {
        const auto& d = j.at("denoiser");
        c.image_size = d.value("image_size", c.image_size);
        c.base_channels = d.value("base_channels", c.base_channels);
        c.text_dim = d.value("text_dim", c.text_dim);
        c.time_dim = d.value("time_dim", c.time_dim);
        c.weights_path = d.value("weights_path", c.weights_path);
    }
    if (j.contains("injection")) {
        const auto& p = j.at("injection");
        c.policy = p.value("policy", c.policy);
        c.anchor_index = p.value("anchor_index", c.anchor_index);
        c.inject_layers = p.value("layers", c.inject_layers);
    }
    if (j.contains("guidance")) {
        const auto& g = j.at("guidance");
        c.delta = g.value("delta", c.delta);
        c.active_steps = g.value("active_steps", c.active_steps);
        c.grad_method = g.value("grad_method", c.grad_method);
        c.normalize_guidance = g.value("normalize", c.normalize_guidance);
    }
    if (j.contains("cfg")) {
        c.cfg_scale_edit = j.at("cfg").value("edit", c.cfg_scale_edit);
        c.cfg_scale_invert = j.at("cfg").value("invert", c.cfg_scale_invert);
    }
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.validate();
    return c;
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    VIDEDIT_CHECK(in.good(), IoError, "cannot open config: " + path.string());
    return run_config_from_json(json::parse(in));
}

inline json to_json(const MetricsRow& r) {
    return json{{"clip_id", r.clip_id},
                {"variant", r.variant},
                {"pixel_mse", r.pixel_mse},
                {"frame_similarity", r.frame_similarity},
                {"prompt_fidelity", r.prompt_fidelity},
                {"n_frames", r.n_frames},
                {"resolution", r.resolution}};
}

inline json to_json(const EditLog& log) {
    json events = json::array();
    for (const auto& e : log.guidance_events)
        events.push_back({{"frame", e.frame},
                          {"step_pos", e.step_pos},
                          {"train_t", e.train_t},
                          {"delta", e.delta},
                          {"energy", e.energy}});
    json out;
    out["guidance_events"] = std::move(events);
    out["guided_update_count"] = log.guidance_events.size();
    if (!log.random_prev_choices.empty()) out["random_prev_choices"] = log.random_prev_choices;
    return out;
}

}  // namespace videdit
