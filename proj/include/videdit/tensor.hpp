#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <vector>

#include "videdit/common.hpp"

namespace videdit {

// Dense row-major double array with up to four dimensions. Small enough to
// pass by value; all pipeline math runs in float64 so per-step identities
// (invert-then-step, self-injection) hold to tight tolerances.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        VIDEDIT_CHECK(static_cast<int64_t>(data_.size()) == numel_of(shape_), ShapeError,
                      "tensor data size does not match shape");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = stddev * rng.normal();
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    double& at(int i, int j) { return data_[static_cast<size_t>(i) * dim(1) + j]; }
    double at(int i, int j) const { return data_[static_cast<size_t>(i) * dim(1) + j]; }

    double& at(int c, int y, int x) {
        return data_[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }
    double at(int c, int y, int x) const {
        return data_[(static_cast<size_t>(c) * dim(1) + y) * dim(2) + x];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(std::vector<int> shape) const {
        VIDEDIT_CHECK(numel_of(shape) == numel(), ShapeError, "reshape changes element count");
        return Tensor(std::move(shape), data_);
    }

    static int64_t numel_of(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            VIDEDIT_CHECK(d >= 0, ShapeError, "negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    VIDEDIT_CHECK(a.same_shape(b), ShapeError, "max_abs_diff: shape mismatch");
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

inline double sum_sq_diff(const Tensor& a, const Tensor& b) {
    VIDEDIT_CHECK(a.same_shape(b), ShapeError, "sum_sq_diff: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline double mse(const Tensor& a, const Tensor& b) {
    return sum_sq_diff(a, b) / static_cast<double>(a.numel());
}

inline double psnr(const Tensor& a, const Tensor& b, double peak) {
    const double m = mse(a, b);
    if (m <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / m);
}

}  // namespace videdit
