#pragma once

#include <array>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "videdit/attention_injection.hpp"
#include "videdit/autograd.hpp"
#include "videdit/schedule.hpp"
#include "videdit/tensor.hpp"

namespace videdit {

// ---------------------------------------------------------------------------
// toy vocabulary and prompt embedding

class Vocab {
public:
    static constexpr int kUnk = 0;
    static constexpr int kNull = 1;

    Vocab() {
        static const char* words[] = {
            "<unk>", "<null>",
            // colors
            "red", "green", "blue", "yellow", "orange", "purple", "cyan", "magenta", "pink",
            "brown", "white", "teal",
            // shapes
            "circle", "square", "triangle",
            // backgrounds
            "gray", "dark", "light", "olive", "navy", "tan",
            // styles and filler
            "plain", "textured", "smooth", "bright", "on", "a", "the", "and", "background",
            "small", "large", "moving", "still", "left", "right", "up", "down",
        };
        for (const char* w : words) {
            index_[w] = static_cast<int>(words_.size());
            words_.emplace_back(w);
        }
    }

    int size() const { return static_cast<int>(words_.size()); }
    const std::vector<std::string>& words() const { return words_; }

    int id(const std::string& w) const {
        const auto it = index_.find(w);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& w) const { return index_.count(w) > 0; }

    // Lowercased whitespace tokenization; empty text maps to the null token.
    std::vector<int> tokenize(const std::string& text, int max_len = 8) const {
        std::vector<int> ids;
        std::string word;
        std::istringstream in(text);
        while (in >> word) {
            for (auto& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
            ids.push_back(id(word));
        }
        if (ids.empty()) ids.push_back(kNull);
        VIDEDIT_CHECK(static_cast<int>(ids.size()) <= max_len, ParameterError,
                      "prompt exceeds the toy token budget");
        return ids;
    }

private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
};

inline Tensor embed_prompt(const std::string& text, const Vocab& vocab, const Tensor& table) {
    const auto ids = vocab.tokenize(text);
    const int c = table.dim(1);
    Tensor out({static_cast<int>(ids.size()), c});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.data() + static_cast<int64_t>(ids[i]) * c,
                  table.data() + static_cast<int64_t>(ids[i] + 1) * c,
                  out.data() + static_cast<int64_t>(i) * c);
    return out;
}

// ---------------------------------------------------------------------------
// configuration and conditioning

// 16 attention-bearing blocks: 1-6 encoder, 7 bottleneck, 8-16 decoder.
struct DenoiserConfig {
    int image_size = 64;  // multiple of 16
    int base_channels = 10;
    int text_dim = 24;
    int time_dim = 48;

    static constexpr int kNumBlocks = 16;
    static constexpr int kEncoderBlocks = 6;
    static constexpr int kDecoderBlocks = 9;

    void validate() const {
        VIDEDIT_CHECK(image_size >= 16 && image_size % 16 == 0, ConfigError,
                      "image_size must be a positive multiple of 16");
        VIDEDIT_CHECK(base_channels >= 4, ConfigError, "base_channels too small");
        VIDEDIT_CHECK(text_dim > 0 && time_dim > 0, ConfigError, "embedding dims must be positive");
    }

    // Channel widths at resolutions S, S/2, S/4, S/8, S/16 (even, for the
    // two-group norms).
    std::array<int, 5> widths() const {
        auto even = [](double x) { return 2 * std::max(1, static_cast<int>(std::lround(x / 2.0))); };
        return {even(base_channels), even(1.4 * base_channels), even(2.0 * base_channels),
                even(2.8 * base_channels), even(3.6 * base_channels)};
    }

    bool operator==(const DenoiserConfig& o) const {
        return image_size == o.image_size && base_channels == o.base_channels &&
               text_dim == o.text_dim && time_dim == o.time_dim;
    }
};

struct ConditioningBundle {
    Tensor prompt_tokens;        // [L, text_dim]
    Tensor depth;                // [1, H, W], values in [0, 1]
    double guidance_scale = 1.0;
};

// ---------------------------------------------------------------------------
// denoiser

struct DenoiseResult {
    ag::Var eps;                     // [3, H, W]
    std::map<int, Tensor> captured;  // layer -> self-attention input features
};

class Denoiser {
public:
    Denoiser() = default;

    Denoiser(const DenoiserConfig& config, uint64_t seed) : cfg_(config) {
        cfg_.validate();
        Rng rng(seed);
        init_params(rng);
    }

    const DenoiserConfig& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }

    std::map<std::string, ag::Var>& params() { return params_; }
    const std::map<std::string, ag::Var>& params() const { return params_; }

    int64_t num_params() const {
        int64_t n = 0;
        for (const auto& [k, v] : params_) n += v.value().numel();
        return n;
    }

    Tensor embed_prompt(const std::string& text) const {
        return videdit::embed_prompt(text, vocab_, param("text.table").value());
    }

    // Full forward pass with classifier-free guidance. guidance_scale == 1
    // evaluates the conditional branch only; above 1 it blends
    // eps_null + scale * (eps_cond - eps_null). Capture and injection apply
    // to the conditional branch; the unconditional branch always runs
    // vanilla self-attention.
    DenoiseResult denoise_var(const ag::Var& x_t, int train_t, const ConditioningBundle& cond,
                              const AttentionControl& control) const {
        check_inputs(x_t.value(), cond, control);
        DenoiseResult res;
        ag::Var eps_c = forward(x_t, train_t, ag::Var::constant(cond.prompt_tokens), cond.depth,
                                control, &res.captured);
        if (cond.guidance_scale > 1.0) {
            AttentionControl vanilla;
            Tensor null_tokens = videdit::embed_prompt("", vocab_, param("text.table").value());
            ag::Var eps_n =
                forward(x_t, train_t, ag::Var::constant(null_tokens), cond.depth, vanilla, nullptr);
            // eps_n + s * (eps_c - eps_n)
            res.eps = ag::add(eps_n, ag::scale(ag::sub(eps_c, eps_n), cond.guidance_scale));
        } else {
            res.eps = eps_c;
        }
        return res;
    }

    std::pair<Tensor, std::map<int, Tensor>> denoise(const Tensor& x_t, int train_t,
                                                     const ConditioningBundle& cond,
                                                     const AttentionControl& control) const {
        ag::NoGradGuard ng;
        DenoiseResult r = denoise_var(ag::Var::constant(x_t), train_t, cond, control);
        return {r.eps.value(), std::move(r.captured)};
    }

    // Training-path forward: plain conditional branch with trainable prompt
    // rows (so the text table learns), no control.
    ag::Var train_eps(const ag::Var& x_t, int train_t, const std::vector<int>& token_ids,
                      const Tensor& depth) const {
        ag::Var tokens = ag::select_rows(param("text.table"), token_ids);
        AttentionControl vanilla;
        return forward(x_t, train_t, tokens, depth, vanilla, nullptr);
    }

    void zero_grad() {
        for (auto& [k, v] : params_) v.zero_grad();
    }

private:
    const ag::Var& param(const std::string& name) const {
        const auto it = params_.find(name);
        VIDEDIT_CHECK(it != params_.end(), StateError, "unknown parameter: " + name);
        return it->second;
    }

    void check_inputs(const Tensor& x, const ConditioningBundle& cond,
                      const AttentionControl& control) const {
        VIDEDIT_CHECK(x.ndim() == 3 && x.dim(0) == 3 && x.dim(1) == cfg_.image_size &&
                          x.dim(2) == cfg_.image_size,
                      ShapeError, "denoise: latent shape does not match config");
        VIDEDIT_CHECK(cond.depth.ndim() == 3 && cond.depth.dim(0) == 1 &&
                          cond.depth.dim(1) == cfg_.image_size && cond.depth.dim(2) == cfg_.image_size,
                      ShapeError, "denoise: depth shape does not match config");
        VIDEDIT_CHECK(cond.prompt_tokens.ndim() == 2 && cond.prompt_tokens.dim(1) == cfg_.text_dim,
                      ShapeError, "denoise: prompt embedding width mismatch");
        VIDEDIT_CHECK(cond.guidance_scale >= 1.0, ParameterError, "guidance_scale must be >= 1");
        for (int l : control.capture_layers)
            VIDEDIT_CHECK(l >= 1 && l <= DenoiserConfig::kNumBlocks, ParameterError,
                          "capture layer index out of range");
        for (int l : control.inject_layers) {
            VIDEDIT_CHECK(l >= 1 && l <= DenoiserConfig::kNumBlocks, ParameterError,
                          "inject layer index out of range");
            if (control.mode == AttentionMode::kInject) {
                const auto it = control.injected_features.find(l);
                VIDEDIT_CHECK(it != control.injected_features.end() && !it->second.empty(),
                              ParameterError,
                              "inject mode lists a layer with no injected features");
            }
        }
    }

    // --- parameter initialization ------------------------------------------

    void add_param(const std::string& name, Tensor t) {
        params_.emplace(name, ag::Var::leaf(std::move(t), true));
    }

    void init_conv(Rng& rng, const std::string& name, int cout, int cin, int k) {
        const double std = std::sqrt(2.0 / (cin * k * k));
        add_param(name + ".w", k == 1 ? Tensor::randn({cout, cin}, rng, std)
                                      : Tensor::randn({cout, cin, k, k}, rng, std));
        add_param(name + ".b", Tensor::zeros({cout}));
    }

    void init_linear(Rng& rng, const std::string& name, int dout, int din, double std_scale = 1.0) {
        add_param(name + ".w", Tensor::randn({dout, din}, rng, std_scale * std::sqrt(1.0 / din)));
        add_param(name + ".b", Tensor::zeros({dout}));
    }

    void init_norm(const std::string& name, int c) {
        add_param(name + ".g", Tensor::full({c}, 1.0));
        add_param(name + ".b", Tensor::zeros({c}));
    }

    void init_resblock(Rng& rng, const std::string& name, int c) {
        init_norm(name + ".gn1", c);
        init_conv(rng, name + ".conv1", c, c, 3);
        init_linear(rng, name + ".temb", c, cfg_.time_dim);
        init_norm(name + ".gn2", c);
        init_conv(rng, name + ".conv2", c, c, 3);
    }

    void init_attn_block(Rng& rng, const std::string& name, int c) {
        init_resblock(rng, name + ".res", c);
        init_norm(name + ".ln_sa", c);
        const double attn_std = 0.5 / std::sqrt(static_cast<double>(c));
        const double out_std = 0.05 / std::sqrt(static_cast<double>(c));
        add_param(name + ".sa.wq", Tensor::randn({c, c}, rng, attn_std));
        add_param(name + ".sa.wk", Tensor::randn({c, c}, rng, attn_std));
        add_param(name + ".sa.wv", Tensor::randn({c, c}, rng, 1.0 / std::sqrt(static_cast<double>(c))));
        add_param(name + ".sa.wo", Tensor::randn({c, c}, rng, out_std));
        init_norm(name + ".ln_ca", c);
        add_param(name + ".ca.wq", Tensor::randn({c, c}, rng, attn_std));
        add_param(name + ".ca.wk", Tensor::randn({c, cfg_.text_dim}, rng,
                                                 0.5 / std::sqrt(static_cast<double>(cfg_.text_dim))));
        add_param(name + ".ca.wv", Tensor::randn({c, cfg_.text_dim}, rng,
                                                 1.0 / std::sqrt(static_cast<double>(cfg_.text_dim))));
        add_param(name + ".ca.wo", Tensor::randn({c, c}, rng, out_std));
    }

    void init_params(Rng& rng) {
        const auto w = cfg_.widths();
        add_param("text.table", Tensor::randn({vocab_.size(), cfg_.text_dim}, rng, 0.5));
        init_linear(rng, "temb.fc1", cfg_.time_dim, kSinDim);
        init_linear(rng, "temb.fc2", cfg_.time_dim, cfg_.time_dim);

        init_conv(rng, "stem", w[0], 4, 3);
        init_resblock(rng, "enc.res0", w[0]);
        init_conv(rng, "down0", w[1], w[0], 3);
        init_resblock(rng, "enc.res1", w[1]);
        init_conv(rng, "down1", w[2], w[1], 3);
        init_attn_block(rng, "block1", w[2]);
        init_attn_block(rng, "block2", w[2]);
        init_conv(rng, "down2", w[3], w[2], 3);
        init_attn_block(rng, "block3", w[3]);
        init_attn_block(rng, "block4", w[3]);
        init_conv(rng, "down3", w[4], w[3], 3);
        init_attn_block(rng, "block5", w[4]);
        init_attn_block(rng, "block6", w[4]);
        init_attn_block(rng, "block7", w[4]);  // bottleneck

        init_conv(rng, "merge4", w[4], 2 * w[4], 1);
        init_attn_block(rng, "block8", w[4]);
        init_attn_block(rng, "block9", w[4]);
        init_attn_block(rng, "block10", w[4]);
        init_conv(rng, "up4", w[3], w[4], 3);
        init_conv(rng, "merge3", w[3], 2 * w[3], 1);
        init_attn_block(rng, "block11", w[3]);
        init_attn_block(rng, "block12", w[3]);
        init_attn_block(rng, "block13", w[3]);
        init_conv(rng, "up3", w[2], w[3], 3);
        init_conv(rng, "merge2", w[2], 2 * w[2], 1);
        init_attn_block(rng, "block14", w[2]);
        init_attn_block(rng, "block15", w[2]);
        init_attn_block(rng, "block16", w[2]);
        init_conv(rng, "up2", w[1], w[2], 3);
        init_conv(rng, "merge1", w[1], 2 * w[1], 1);
        init_resblock(rng, "dec.res1", w[1]);
        init_conv(rng, "up1", w[0], w[1], 3);
        init_conv(rng, "merge0", w[0], 2 * w[0], 1);
        init_resblock(rng, "dec.res0", w[0]);
        init_norm("out.norm", w[0]);
        init_conv(rng, "out", 3, w[0], 3);
        // damp the output conv so the untrained net predicts near-zero noise
        auto& ow = params_.at("out.w");
        for (auto& v : ow.value().vec()) v *= 0.05;
    }

    // --- forward pieces ------------------------------------------------------

    static constexpr int kSinDim = 32;

    Tensor time_embedding_raw(int train_t) const {
        Tensor e({1, kSinDim});
        const int half = kSinDim / 2;
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / (half - 1));
            e[i] = std::sin(train_t * freq);
            e[half + i] = std::cos(train_t * freq);
        }
        return e;
    }

    ag::Var time_embedding(int train_t) const {
        ag::Var e = ag::Var::constant(time_embedding_raw(train_t));
        e = ag::linear(e, param("temb.fc1.w"), param("temb.fc1.b"));
        e = ag::silu(e);
        return ag::linear(e, param("temb.fc2.w"), param("temb.fc2.b"));
    }

    ag::Var conv(const std::string& name, const ag::Var& x, int stride = 1) const {
        const ag::Var& w = param(name + ".w");
        if (w.value().ndim() == 2) return ag::conv1x1(x, w, param(name + ".b"));
        return ag::conv3x3(x, w, param(name + ".b"), stride);
    }

    ag::Var norm(const std::string& name, const ag::Var& x) const {
        return ag::group_norm(x, param(name + ".g"), param(name + ".b"), 2);
    }

    // Adds the time embedding, projected per channel, to a [C, H, W] map.
    ag::Var add_temb(const ag::Var& h, const ag::Var& temb, const std::string& name) const {
        ag::Var proj = ag::linear(temb, param(name + ".w"), param(name + ".b"));  // [1, C]
        return ag::add_channel_bias(h, proj);
    }

    ag::Var resblock(const std::string& name, const ag::Var& x, const ag::Var& temb) const {
        ag::Var h = conv(name + ".conv1", ag::silu(norm(name + ".gn1", x)));
        h = add_temb(h, temb, name + ".temb");
        h = conv(name + ".conv2", ag::silu(norm(name + ".gn2", h)));
        return ag::add(x, h);
    }

    ag::Var attn_block(int layer_id, const ag::Var& x_in, const ag::Var& temb,
                       const ag::Var& prompt_tokens, const AttentionControl& control,
                       std::map<int, Tensor>* captured) const {
        const std::string name = "block" + std::to_string(layer_id);
        ag::Var x = resblock(name + ".res", x_in, temb);
        const int h = x.value().dim(1), w = x.value().dim(2);

        // self-attention; f is the layer's input feature matrix f_t^l
        ag::Var f = ag::layer_norm_rows(ag::to_tokens(x), param(name + ".ln_sa.g"),
                                        param(name + ".ln_sa.b"));
        if (control.captures(layer_id) && captured != nullptr) {
            (*captured)[layer_id] = f.value();
        }
        ag::Var attn_out;
        if (control.injects(layer_id)) {
            const auto& sources = control.injected_features.at(layer_id);
            attn_out = cross_frame_attention(f, sources, param(name + ".sa.wq"),
                                             param(name + ".sa.wk"), param(name + ".sa.wv"));
        } else {
            attn_out = self_attention(f, param(name + ".sa.wq"), param(name + ".sa.wk"),
                                      param(name + ".sa.wv"));
        }
        x = ag::add(x, ag::to_spatial(ag::matmul(attn_out, ag::transpose(param(name + ".sa.wo"))),
                                      h, w));

        // cross-attention over the prompt tokens
        ag::Var g = ag::layer_norm_rows(ag::to_tokens(x), param(name + ".ln_ca.g"),
                                        param(name + ".ln_ca.b"));
        ag::Var q = ag::matmul(g, ag::transpose(param(name + ".ca.wq")));
        ag::Var k = ag::matmul(prompt_tokens, ag::transpose(param(name + ".ca.wk")));
        ag::Var v = ag::matmul(prompt_tokens, ag::transpose(param(name + ".ca.wv")));
        ag::Var ca = ag::matmul(ag::softmax_rows(ag::matmul(q, ag::transpose(k))), v);
        x = ag::add(x, ag::to_spatial(ag::matmul(ca, ag::transpose(param(name + ".ca.wo"))), h, w));
        return x;
    }

    ag::Var forward(const ag::Var& x_img, int train_t, const ag::Var& prompt_tokens,
                    const Tensor& depth, const AttentionControl& control,
                    std::map<int, Tensor>* captured) const {
        const ag::Var temb = time_embedding(train_t);
        ag::Var x = ag::concat_channels(x_img, ag::Var::constant(depth));

        x = conv("stem", x);
        const ag::Var h0 = resblock("enc.res0", x, temb);
        x = conv("down0", h0, 2);
        const ag::Var h1 = resblock("enc.res1", x, temb);
        x = conv("down1", h1, 2);
        x = attn_block(1, x, temb, prompt_tokens, control, captured);
        const ag::Var h2 = attn_block(2, x, temb, prompt_tokens, control, captured);
        x = conv("down2", h2, 2);
        x = attn_block(3, x, temb, prompt_tokens, control, captured);
        const ag::Var h3 = attn_block(4, x, temb, prompt_tokens, control, captured);
        x = conv("down3", h3, 2);
        x = attn_block(5, x, temb, prompt_tokens, control, captured);
        const ag::Var h4 = attn_block(6, x, temb, prompt_tokens, control, captured);
        x = attn_block(7, h4, temb, prompt_tokens, control, captured);

        x = conv("merge4", ag::concat_channels(x, h4));
        x = attn_block(8, x, temb, prompt_tokens, control, captured);
        x = attn_block(9, x, temb, prompt_tokens, control, captured);
        x = attn_block(10, x, temb, prompt_tokens, control, captured);
        x = conv("up4", ag::upsample_nearest2x(x));
        x = conv("merge3", ag::concat_channels(x, h3));
        x = attn_block(11, x, temb, prompt_tokens, control, captured);
        x = attn_block(12, x, temb, prompt_tokens, control, captured);
        x = attn_block(13, x, temb, prompt_tokens, control, captured);
        x = conv("up3", ag::upsample_nearest2x(x));
        x = conv("merge2", ag::concat_channels(x, h2));
        x = attn_block(14, x, temb, prompt_tokens, control, captured);
        x = attn_block(15, x, temb, prompt_tokens, control, captured);
        x = attn_block(16, x, temb, prompt_tokens, control, captured);
        x = conv("up2", ag::upsample_nearest2x(x));
        x = conv("merge1", ag::concat_channels(x, h1));
        x = resblock("dec.res1", x, temb);
        x = conv("up1", ag::upsample_nearest2x(x));
        x = conv("merge0", ag::concat_channels(x, h0));
        x = resblock("dec.res0", x, temb);
        return conv("out", ag::silu(norm("out.norm", x)));
    }

    DenoiserConfig cfg_;
    Vocab vocab_;
    std::map<std::string, ag::Var> params_;

    friend class DenoiserIo;
};

}  // namespace videdit
