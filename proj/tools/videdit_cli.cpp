#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "videdit/io.hpp"
#include "videdit/metrics.hpp"
#include "videdit/pipeline.hpp"
#include "videdit/synth.hpp"
#include "videdit/training.hpp"

namespace fs = std::filesystem;
using namespace videdit;

namespace {

struct CommonFlags {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string prompt;
    double delta = -1.0;
    int active_steps = -1;
    std::string policy;
    std::string inject_layers;
    std::string grad_method;
    double cfg_scale = -1.0;
    std::string out_dir;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "JSON run configuration");
    cmd->add_option("--seed", f.seed, "random seed")->each([&](const std::string&) {
        f.seed_set = true;
    });
    cmd->add_option("--prompt", f.prompt, "text prompt");
    cmd->add_option("--delta", f.delta, "guided-update step size");
    cmd->add_option("--active-steps", f.active_steps, "number of guided denoising steps");
    cmd->add_option("--policy", f.policy,
                    "injection policy: none|anchor_only|prev_only|anchor_plus_prev|"
                    "anchor_plus_random_prev");
    cmd->add_option("--inject-layers", f.inject_layers, "decoder|all|comma list of 1..16");
    cmd->add_option("--grad-method", f.grad_method, "autodiff|frozen_eps");
    cmd->add_option("--cfg-scale", f.cfg_scale, "classifier-free guidance scale for editing");
    cmd->add_option("--out", f.out_dir, "output directory");
}

RunConfig resolve_config(const CommonFlags& f) {
    RunConfig cfg = f.config_path.empty() ? RunConfig{} : load_run_config(f.config_path);
    if (f.seed_set) cfg.seed = f.seed;
    if (f.delta >= 0.0) cfg.delta = f.delta;
    if (f.active_steps >= 0) cfg.active_steps = f.active_steps;
    if (!f.policy.empty()) cfg.policy = f.policy;
    if (!f.inject_layers.empty()) cfg.inject_layers = f.inject_layers;
    if (!f.grad_method.empty()) {
        VIDEDIT_CHECK(f.grad_method == "autodiff" || f.grad_method == "frozen_eps", ConfigError,
                      "--grad-method must be autodiff or frozen_eps");
        cfg.grad_method = f.grad_method;
    }
    if (f.cfg_scale >= 0.0) cfg.cfg_scale_edit = f.cfg_scale;
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    cfg.validate();
    return cfg;
}

Denoiser load_model(const RunConfig& cfg, const std::string& weights_flag) {
    const std::string path = weights_flag.empty() ? cfg.weights_path : weights_flag;
    VIDEDIT_CHECK(!path.empty(), ConfigError, "no weights file given (--weights)");
    Denoiser model = DenoiserIo::load(path);
    VIDEDIT_CHECK(model.config().image_size == cfg.image_size, ConfigError,
                  "weights resolution does not match the configured image size");
    return model;
}

LatentsKey make_key(const VideoClip& clip, const std::string& weights_path,
                    const DiffusionSchedule& sched) {
    return {hash_hex(clip_hash(clip)), hash_hex(DenoiserIo::file_hash(weights_path)),
            hash_hex(schedule_hash(sched))};
}

void write_metrics(const fs::path& path, const std::vector<MetricsRow>& rows) {
    json arr = json::array();
    for (const auto& r : rows) arr.push_back(to_json(r));
    std::ofstream out(path);
    out << arr.dump(2) << "\n";
    VIDEDIT_CHECK(out.good(), IoError, "failed writing metrics: " + path.string());
    std::printf("wrote %s\n", path.string().c_str());
}

// --- subcommands -----------------------------------------------------------

int cmd_synth(const CommonFlags& flags, int n_frames, int resolution, bool rotational,
              int n_clips) {
    RunConfig cfg = resolve_config(flags);
    VIDEDIT_CHECK(!cfg.out_dir.empty(), ConfigError, "synth requires --out");
    for (int i = 0; i < n_clips; ++i) {
        const SceneSpec spec = standard_fixture(cfg.seed + static_cast<uint64_t>(i), n_frames,
                                                resolution, rotational);
        const VideoClip clip = generate_clip(spec);
        const fs::path dir = n_clips == 1 ? fs::path(cfg.out_dir)
                                          : fs::path(cfg.out_dir) / ("clip_" + zero_pad(i));
        write_clip(dir, clip, spec.seed);
        std::printf("wrote clip '%s' (%d frames, %dx%d, \"%s\")\n", dir.string().c_str(),
                    clip.n_frames(), clip.width(), clip.height(), clip.source_prompt.c_str());
    }
    return 0;
}

int cmd_corpus(const CommonFlags& flags, int n_clips, int resolution) {
    RunConfig cfg = resolve_config(flags);
    VIDEDIT_CHECK(!cfg.out_dir.empty(), ConfigError, "corpus requires --out");
    const auto corpus = generate_corpus(n_clips, cfg.seed, resolution);
    for (size_t i = 0; i < corpus.size(); ++i) {
        VideoClip one;
        one.frames = {corpus[i].sample.image};
        one.depths = {corpus[i].sample.depth};
        one.source_prompt = corpus[i].sample.caption;
        write_clip(fs::path(cfg.out_dir) / ("sample_" + zero_pad(static_cast<int>(i))), one,
                   cfg.seed);
    }
    std::printf("wrote %zu corpus samples under %s\n", corpus.size(), cfg.out_dir.c_str());
    return 0;
}

int cmd_train(const CommonFlags& flags, const std::string& corpus_dir, int steps, int corpus_size,
              const std::string& weights_out, int batch_size, double lr) {
    RunConfig cfg = resolve_config(flags);
    const DiffusionSchedule sched = cfg.make_sched();

    ToyDataset dataset;
    if (!corpus_dir.empty()) {
        for (const auto& entry : fs::directory_iterator(corpus_dir)) {
            if (!entry.is_directory()) continue;
            const VideoClip one = read_clip(entry.path());
            for (int i = 0; i < one.n_frames(); ++i)
                dataset.push_back({one.frames[static_cast<size_t>(i)], one.source_prompt,
                                   one.depths[static_cast<size_t>(i)]});
        }
        std::printf("loaded %zu training samples from %s\n", dataset.size(), corpus_dir.c_str());
    } else {
        dataset = corpus_to_dataset(generate_corpus(corpus_size, cfg.seed, cfg.image_size));
        std::printf("generated %zu training samples (seed %llu)\n", dataset.size(),
                    static_cast<unsigned long long>(cfg.seed));
    }

    Denoiser model(cfg.denoiser_config(), cfg.seed);
    TrainOptions opt;
    opt.steps = steps;
    opt.batch_size = batch_size;
    opt.lr = lr;
    opt.seed = cfg.seed + 1;
    opt.verbose = true;
    const TrainReport report = train_toy(model, dataset, sched, opt);
    std::printf("loss: first-window %.4f -> last-window %.4f\n", report.initial_loss,
                report.final_loss);
    DenoiserIo::save(model, weights_out);
    std::printf("wrote weights to %s (%lld parameters)\n", weights_out.c_str(),
                static_cast<long long>(model.num_params()));
    return 0;
}

int cmd_invert(const CommonFlags& flags, const std::string& clip_dir,
               const std::string& weights) {
    RunConfig cfg = resolve_config(flags);
    VIDEDIT_CHECK(!cfg.out_dir.empty(), ConfigError, "invert requires --out");
    const DiffusionSchedule sched = cfg.make_sched();
    const VideoClip clip = read_clip(clip_dir);
    const Denoiser model = load_model(cfg, weights);
    const std::string wpath = weights.empty() ? cfg.weights_path : weights;

    const LatentsKey key = make_key(clip, wpath, sched);
    if (latents_match(cfg.out_dir, key)) {
        std::printf("latents in %s already match this clip/weights/schedule; nothing to do\n",
                    cfg.out_dir.c_str());
        return 0;
    }
    const auto latents = invert_clip(clip, model, sched, cfg.cfg_scale_invert);
    save_latents(cfg.out_dir, latents, key, sched);
    std::printf("wrote %zu inverted latents to %s\n", latents.size(), cfg.out_dir.c_str());
    return 0;
}

int cmd_edit(const CommonFlags& flags, const std::string& clip_dir, const std::string& latents_dir,
             const std::string& weights) {
    RunConfig cfg = resolve_config(flags);
    VIDEDIT_CHECK(!cfg.out_dir.empty(), ConfigError, "edit requires --out");
    VIDEDIT_CHECK(!flags.prompt.empty(), ConfigError, "edit requires --prompt");
    const DiffusionSchedule sched = cfg.make_sched();
    const VideoClip clip = read_clip(clip_dir);
    const Denoiser model = load_model(cfg, weights);
    const std::string wpath = weights.empty() ? cfg.weights_path : weights;

    std::vector<LatentFrame> latents;
    const LatentsKey key = make_key(clip, wpath, sched);
    if (!latents_dir.empty() && latents_match(latents_dir, key)) {
        latents = load_latents(latents_dir);
        std::printf("reusing inverted latents from %s\n", latents_dir.c_str());
    } else {
        VIDEDIT_CHECK(latents_dir.empty(), ConfigError,
                      "latents directory does not match this clip/weights/schedule");
        latents = invert_clip(clip, model, sched, cfg.cfg_scale_invert);
    }

    const EditResult res =
        edit_clip(clip, flags.prompt, model, sched, cfg.edit_options(), &latents);
    write_clip(cfg.out_dir, res.clip, cfg.seed);
    std::ofstream log_out(fs::path(cfg.out_dir) / "run_log.json");
    json log_json = to_json(res.log);
    log_json["config"] = to_json(cfg);
    log_json["edit_prompt"] = flags.prompt;
    log_out << log_json.dump(2) << "\n";
    std::printf("wrote edited clip to %s (%d frames, %d guided updates)\n", cfg.out_dir.c_str(),
                res.clip.n_frames(), res.log.guided_updates());
    return 0;
}

int cmd_ablate(const CommonFlags& flags, const std::string& clip_dir, const std::string& weights,
               const std::string& variant_list, const std::string& classifier_corpus) {
    RunConfig cfg = resolve_config(flags);
    VIDEDIT_CHECK(!cfg.out_dir.empty(), ConfigError, "ablate requires --out");
    VIDEDIT_CHECK(!flags.prompt.empty(), ConfigError, "ablate requires --prompt");
    const DiffusionSchedule sched = cfg.make_sched();
    const VideoClip clip = read_clip(clip_dir);
    const Denoiser model = load_model(cfg, weights);
    const EditOptions base = cfg.edit_options();

    std::vector<AblationVariant> variants;
    std::stringstream ss(variant_list);
    std::string name;
    while (std::getline(ss, name, ',')) {
        if (name.empty()) continue;
        if (name == "ours" || name == "ours_no_update" || name == "per_frame") {
            for (auto& v : standard_variants(base))
                if (v.name == name) variants.push_back(v);
        } else if (name == "anchor_only" || name == "prev_only" || name == "anchor_plus_prev" ||
                   name == "anchor_plus_random_prev") {
            AblationVariant v{name, base.policy, base.guidance};
            v.policy.mode = injection_mode_from_string(name);
            variants.push_back(v);
        } else if (name == "decoder_layers" || name == "all_layers") {
            AblationVariant v{name, base.policy, base.guidance};
            v.policy.layers = name == "all_layers" ? all_layers() : decoder_layers();
            variants.push_back(v);
        } else {
            throw ConfigError("unknown ablation variant: " + name);
        }
    }

    AttributeClassifier classifier;
    AblationOptions aopts;
    aopts.clip_id = fs::path(clip_dir).filename().string();
    if (!classifier_corpus.empty()) {
        // corpus dir written by `videdit corpus`, reused to train the scorer
        ToyDataset unused;
        std::vector<CorpusExample> corpus;
        for (const auto& entry : fs::directory_iterator(classifier_corpus)) {
            if (!entry.is_directory()) continue;
            const VideoClip one = read_clip(entry.path());
            CorpusExample ex;
            ex.sample = {one.frames[0], one.source_prompt, one.depths[0]};
            std::istringstream caption(one.source_prompt);
            caption >> ex.color >> ex.shape;
            corpus.push_back(std::move(ex));
        }
        classifier = AttributeClassifier(cfg.seed + 7);
        classifier.train(corpus);
        aopts.classifier = &classifier;
    }

    const auto rows = run_ablation(clip, flags.prompt, variants, model, sched, base, aopts);
    fs::create_directories(cfg.out_dir);
    write_metrics(fs::path(cfg.out_dir) / "ablation.json", rows);
    for (const auto& r : rows)
        std::printf("%-24s pixel_mse %10.3f  frame_sim %.4f  fidelity %6.3f\n", r.variant.c_str(),
                    r.pixel_mse, r.frame_similarity, r.prompt_fidelity);
    return 0;
}

int cmd_eval(const CommonFlags& flags, const std::string& edited_dir,
             const std::string& reference_dir, const std::string& classifier_corpus,
             bool use_edited_flow) {
    RunConfig cfg = resolve_config(flags);
    const VideoClip edited = read_clip(edited_dir);
    const VideoClip reference = read_clip(reference_dir);
    VIDEDIT_CHECK(edited.n_frames() == reference.n_frames(), ParameterError,
                  "edited and reference clips must have the same frame count");

    AttributeClassifier classifier;
    AblationOptions aopts;
    aopts.use_edited_flow = use_edited_flow;
    aopts.clip_id = fs::path(edited_dir).filename().string();
    if (!classifier_corpus.empty()) {
        std::vector<CorpusExample> corpus;
        for (const auto& entry : fs::directory_iterator(classifier_corpus)) {
            if (!entry.is_directory()) continue;
            const VideoClip one = read_clip(entry.path());
            CorpusExample ex;
            ex.sample = {one.frames[0], one.source_prompt, one.depths[0]};
            std::istringstream caption(one.source_prompt);
            caption >> ex.color >> ex.shape;
            corpus.push_back(std::move(ex));
        }
        classifier = AttributeClassifier(cfg.seed + 7);
        classifier.train(corpus);
        aopts.classifier = &classifier;
    }
    const std::string prompt = flags.prompt.empty() ? edited.source_prompt : flags.prompt;
    const MetricsRow row = evaluate_edit(reference, edited, prompt, aopts, "eval");
    const fs::path out =
        cfg.out_dir.empty() ? fs::path(edited_dir) / "metrics.json" : fs::path(cfg.out_dir);
    write_metrics(out, {row});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy depth-conditioned video editing with cross-frame attention and guided "
                 "latent updates"};
    app.require_subcommand(1);

    CommonFlags flags;

    auto* synth = app.add_subcommand("synth", "generate a synthetic test clip");
    int n_frames = 8, resolution = 64, n_clips = 1;
    bool rotational = false;
    synth->add_option("--frames", n_frames, "frames per clip");
    synth->add_option("--resolution", resolution, "square resolution");
    synth->add_flag("--rotational", rotational, "circular shape trajectory");
    synth->add_option("--clips", n_clips, "number of clips");
    add_common(synth, flags);

    auto* corpus = app.add_subcommand("corpus", "generate a training corpus");
    int corpus_n = 400, corpus_res = 64;
    corpus->add_option("--clips", corpus_n, "number of samples");
    corpus->add_option("--resolution", corpus_res, "square resolution");
    add_common(corpus, flags);

    auto* train = app.add_subcommand("train", "train the toy denoiser");
    std::string corpus_dir, weights_out = "weights.bin";
    int train_steps = 3000, train_corpus_size = 400, batch_size = 1;
    double lr = 1.5e-3;
    train->add_option("--corpus-dir", corpus_dir, "clip-directory corpus (default: generated)");
    train->add_option("--steps", train_steps, "optimizer steps");
    train->add_option("--corpus-size", train_corpus_size, "generated corpus size");
    train->add_option("--batch-size", batch_size, "samples per optimizer step");
    train->add_option("--lr", lr, "peak learning rate");
    train->add_option("--weights-out", weights_out, "output weight archive");
    add_common(train, flags);

    auto* invert = app.add_subcommand("invert", "DDIM-invert a clip and persist the latents");
    std::string clip_dir, weights;
    invert->add_option("--clip", clip_dir, "input clip directory")->required();
    invert->add_option("--weights", weights, "weight archive");
    add_common(invert, flags);

    auto* edit = app.add_subcommand("edit", "edit a clip with a text prompt");
    std::string latents_dir;
    edit->add_option("--clip", clip_dir, "input clip directory")->required();
    edit->add_option("--latents", latents_dir, "persisted latents directory");
    edit->add_option("--weights", weights, "weight archive");
    add_common(edit, flags);

    auto* ablate = app.add_subcommand("ablate", "run edit variants and report metrics");
    std::string variant_list = "ours,ours_no_update,per_frame", classifier_corpus;
    ablate->add_option("--clip", clip_dir, "input clip directory")->required();
    ablate->add_option("--weights", weights, "weight archive");
    ablate->add_option("--variants", variant_list, "comma list of variants");
    ablate->add_option("--classifier-corpus", classifier_corpus,
                       "corpus directory for the attribute classifier");
    add_common(ablate, flags);

    auto* eval = app.add_subcommand("eval", "score an edited clip against its source");
    std::string edited_dir, reference_dir;
    bool use_edited_flow = false;
    eval->add_option("--edited", edited_dir, "edited clip directory")->required();
    eval->add_option("--reference", reference_dir, "source clip directory")->required();
    eval->add_option("--classifier-corpus", classifier_corpus,
                     "corpus directory for the attribute classifier");
    eval->add_flag("--edited-flow", use_edited_flow, "estimate flow on the edited clip");
    add_common(eval, flags);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) return cmd_synth(flags, n_frames, resolution, rotational, n_clips);
        if (corpus->parsed()) return cmd_corpus(flags, corpus_n, corpus_res);
        if (train->parsed())
            return cmd_train(flags, corpus_dir, train_steps, train_corpus_size, weights_out,
                             batch_size, lr);
        if (invert->parsed()) return cmd_invert(flags, clip_dir, weights);
        if (edit->parsed()) return cmd_edit(flags, clip_dir, latents_dir, weights);
        if (ablate->parsed())
            return cmd_ablate(flags, clip_dir, weights, variant_list, classifier_corpus);
        if (eval->parsed())
            return cmd_eval(flags, edited_dir, reference_dir, classifier_corpus, use_edited_flow);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
