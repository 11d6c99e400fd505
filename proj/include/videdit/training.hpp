#pragma once

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "videdit/denoiser.hpp"
#include "videdit/schedule.hpp"

namespace videdit {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

struct TrainExample {
    Tensor image;  // [3, S, S], values in [-1, 1]
    std::string caption;
    Tensor depth;  // [1, S, S], values in [0, 1]
};

using ToyDataset = std::vector<TrainExample>;

// ---------------------------------------------------------------------------
// Adam

class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::map<std::string, ag::Var>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& [name, p] : params) {
            if (p.grad().empty()) continue;
            auto& slot = slots_[name];
            if (slot.m.empty()) {
                slot.m = Tensor::zeros(p.value().shape());
                slot.v = Tensor::zeros(p.value().shape());
            }
            Tensor& value = p.value();
            const Tensor& g = p.grad();
            for (int64_t i = 0; i < value.numel(); ++i) {
                slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g[i];
                slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g[i] * g[i];
                const double mhat = slot.m[i] / bc1;
                const double vhat = slot.v[i] / bc2;
                value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }

private:
    struct Slot {
        Tensor m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::map<std::string, Slot> slots_;
};

// ---------------------------------------------------------------------------
// training

struct TrainOptions {
    int steps = 3000;
    int batch_size = 2;
    double lr = 1.5e-3;
    double lr_final_frac = 0.1;     // cosine decay floor as a fraction of lr
    double null_prompt_prob = 0.1;  // classifier-free guidance dropout
    uint64_t seed = 17;
    int log_every = 100;
    bool verbose = false;
};

struct TrainReport {
    std::vector<double> losses;        // per optimizer step
    double initial_loss = 0.0;         // mean over the first 50 steps
    double final_loss = 0.0;           // mean over the last 50 steps
};

// Standard denoising objective: sample a train step, noise the image with the
// schedule's alpha_bar, and regress the added noise conditioned on the
// caption embedding and depth map.
inline TrainReport train_toy(Denoiser& model, const ToyDataset& dataset,
                             const DiffusionSchedule& sched, const TrainOptions& opt) {
    VIDEDIT_CHECK(!dataset.empty(), ParameterError, "train_toy: empty dataset");
    const int s = model.config().image_size;
    for (const auto& ex : dataset) {
        VIDEDIT_CHECK(ex.image.ndim() == 3 && ex.image.dim(0) == 3 && ex.image.dim(1) == s &&
                          ex.image.dim(2) == s,
                      ShapeError, "train_toy: dataset image shape does not match config");
    }
    Rng rng(opt.seed);
    Adam adam(opt.lr);
    TrainReport report;
    report.losses.reserve(static_cast<size_t>(opt.steps));

    for (int step = 0; step < opt.steps; ++step) {
        // cosine learning-rate decay
        const double prog = opt.steps > 1 ? static_cast<double>(step) / (opt.steps - 1) : 0.0;
        const double floor = opt.lr * opt.lr_final_frac;
        adam.set_lr(floor + 0.5 * (opt.lr - floor) * (1.0 + std::cos(3.14159265358979 * prog)));

        model.zero_grad();
        double batch_loss = 0.0;
        for (int b = 0; b < opt.batch_size; ++b) {
            const auto& ex = dataset[static_cast<size_t>(rng.below(dataset.size()))];
            const int t = static_cast<int>(rng.below(sched.num_train_steps));
            const double abar = sched.alpha_bar[static_cast<size_t>(t)];
            const double c0 = std::sqrt(abar), c1 = std::sqrt(1.0 - abar);
            Tensor eps = Tensor::randn(ex.image.shape(), rng);
            Tensor x_t = ex.image;
            for (int64_t i = 0; i < x_t.numel(); ++i) x_t[i] = c0 * x_t[i] + c1 * eps[i];

            std::vector<int> tokens = rng.uniform() < opt.null_prompt_prob
                                          ? std::vector<int>{Vocab::kNull}
                                          : model.vocab().tokenize(ex.caption);
            ag::Var eps_hat = model.train_eps(ag::Var::leaf(std::move(x_t), false), t, tokens,
                                              ex.depth);
            ag::Var loss = ag::scale(ag::mean_sq_diff(eps_hat, ag::Var::constant(eps)),
                                     1.0 / opt.batch_size);
            loss.backward();
            batch_loss += loss.value()[0];
        }
        adam.step(model.params());
        report.losses.push_back(batch_loss);
        if (opt.verbose && (step % opt.log_every == 0 || step + 1 == opt.steps)) {
            std::fprintf(stderr, "train step %5d  loss %.4f  lr %.2e\n", step, batch_loss,
                         adam.lr());
        }
    }
    const size_t window = std::min<size_t>(50, report.losses.size());
    double a = 0.0, z = 0.0;
    for (size_t i = 0; i < window; ++i) {
        a += report.losses[i];
        z += report.losses[report.losses.size() - 1 - i];
    }
    report.initial_loss = a / window;
    report.final_loss = z / window;
    return report;
}

// ---------------------------------------------------------------------------
// weight archive: 8-byte magic, u64 little-endian JSON header length, JSON
// header (config echo, tensor table), then raw float64 payload.

class DenoiserIo {
public:
    static constexpr char kMagic[8] = {'V', 'D', 'W', 'G', 'T', '0', '1', '\n'};

    static void save(const Denoiser& model, const std::string& path) {
        nlohmann::json header;
        header["format"] = "videdit-weights";
        header["version"] = 1;
        header["dtype"] = "f64";
        header["config"] = {{"image_size", model.config().image_size},
                            {"base_channels", model.config().base_channels},
                            {"text_dim", model.config().text_dim},
                            {"time_dim", model.config().time_dim}};
        nlohmann::json table = nlohmann::json::array();
        int64_t offset = 0;
        for (const auto& [name, p] : model.params()) {
            table.push_back({{"name", name}, {"shape", p.value().shape()}, {"offset", offset}});
            offset += p.value().numel();
        }
        header["tensors"] = std::move(table);
        const std::string hs = header.dump();

        std::ofstream out(path, std::ios::binary);
        VIDEDIT_CHECK(out.good(), IoError, "cannot open weight file for writing: " + path);
        out.write(kMagic, 8);
        const uint64_t hlen = hs.size();
        out.write(reinterpret_cast<const char*>(&hlen), 8);
        out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, p] : model.params()) {
            out.write(reinterpret_cast<const char*>(p.value().data()),
                      static_cast<std::streamsize>(p.value().numel() * 8));
        }
        VIDEDIT_CHECK(out.good(), IoError, "failed writing weight file: " + path);
    }

    static Denoiser load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        VIDEDIT_CHECK(in.good(), IoError, "cannot open weight file: " + path);
        char magic[8];
        in.read(magic, 8);
        VIDEDIT_CHECK(in.good() && std::memcmp(magic, kMagic, 8) == 0, IoError,
                      "not a weight archive: " + path);
        uint64_t hlen = 0;
        in.read(reinterpret_cast<char*>(&hlen), 8);
        std::string hs(hlen, '\0');
        in.read(hs.data(), static_cast<std::streamsize>(hlen));
        VIDEDIT_CHECK(in.good(), IoError, "truncated weight header: " + path);
        const nlohmann::json header = nlohmann::json::parse(hs);
        VIDEDIT_CHECK(header.at("dtype") == "f64", IoError, "unsupported weight dtype");

        DenoiserConfig cfg;
        cfg.image_size = header.at("config").at("image_size").get<int>();
        cfg.base_channels = header.at("config").at("base_channels").get<int>();
        cfg.text_dim = header.at("config").at("text_dim").get<int>();
        cfg.time_dim = header.at("config").at("time_dim").get<int>();
        Denoiser model(cfg, 0);

        size_t listed = 0;
        for (const auto& entry : header.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const auto it = model.params().find(name);
            VIDEDIT_CHECK(it != model.params().end(), IoError,
                          "weight archive names unknown tensor: " + name);
            const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
            VIDEDIT_CHECK(shape == it->second.value().shape(), IoError,
                          "weight tensor shape mismatch: " + name);
            ++listed;
        }
        VIDEDIT_CHECK(listed == model.params().size(), IoError,
                      "weight archive tensor count mismatch");
        for (const auto& entry : header.at("tensors")) {
            auto& t = model.params().at(entry.at("name").get<std::string>()).value();
            in.read(reinterpret_cast<char*>(t.data()),
                    static_cast<std::streamsize>(t.numel() * 8));
        }
        VIDEDIT_CHECK(in.good(), IoError, "truncated weight payload: " + path);
        return model;
    }

    static uint64_t file_hash(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        VIDEDIT_CHECK(in.good(), IoError, "cannot open file for hashing: " + path);
        uint64_t h = 0xcbf29ce484222325ull;
        char buf[1 << 16];
        while (in.good()) {
            in.read(buf, sizeof(buf));
            h = fnv1a(buf, static_cast<size_t>(in.gcount()), h);
        }
        return h;
    }
};

}  // namespace videdit
