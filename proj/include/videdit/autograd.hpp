#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "videdit/tensor.hpp"

namespace videdit::ag {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

inline CMapRM as_mat(const Tensor& t, int rows, int cols) {
    return CMapRM(t.data(), rows, cols);
}
inline MapRM as_mat(Tensor& t, int rows, int cols) {
    return MapRM(t.data(), rows, cols);
}

// Reverse-mode tape. Nodes own their forward value; gradients are allocated
// lazily during backward. A node keeps its parents alive, so holding the
// root of an expression keeps the whole graph reachable.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backfn;  // scatters node.grad into parents

    void ensure_grad() {
        if (grad.empty()) grad = Tensor::zeros(value.shape());
    }
};

// Thread-local switch: with grads disabled, ops compute values only and the
// result carries no parents (inference mode).
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = saved; }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = requires_grad && grad_enabled();
        return Var(std::move(n));
    }

    static Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value() const { return n_->value; }
    Tensor& value() { return n_->value; }
    const Tensor& grad() const { return n_->grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    std::shared_ptr<Node> node() const { return n_; }
    bool defined() const { return static_cast<bool>(n_); }

    void zero_grad() {
        if (n_ && !n_->grad.empty())
            std::fill(n_->grad.vec().begin(), n_->grad.vec().end(), 0.0);
    }

    // Backpropagates from this node. For non-scalar roots a seed gradient
    // must be supplied.
    void backward(const Tensor* seed = nullptr) const {
        VIDEDIT_CHECK(n_, StateError, "backward on empty Var");
        VIDEDIT_CHECK(n_->requires_grad, StateError, "backward on a graph with no grad path");
        n_->ensure_grad();
        if (seed) {
            VIDEDIT_CHECK(seed->same_shape(n_->value), ShapeError, "seed shape mismatch");
            for (int64_t i = 0; i < seed->numel(); ++i) n_->grad[i] += (*seed)[i];
        } else {
            VIDEDIT_CHECK(n_->value.numel() == 1, ParameterError,
                          "backward without seed requires a scalar root");
            n_->grad[0] += 1.0;
        }
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        topo(n_.get(), seen, order);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backfn && !node->grad.empty()) node->backfn(*node);
        }
    }

private:
    static void topo(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
        // Iterative DFS; graphs run to a few thousand nodes.
        struct Frame {
            Node* node;
            size_t next_parent;
        };
        std::vector<Frame> stack{{n, 0}};
        seen.insert(n);
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                Node* p = f.node->parents[f.next_parent++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> n_;
};

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& v : inputs) any = any || v.requires_grad();
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (auto& v : inputs) n->parents.push_back(v.node());
            n->backfn = std::move(backfn);
        }
    }
    return Var(std::move(n));
}

inline void accum(Node& parent, const Tensor& g) {
    parent.ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) parent.grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Var add(const Var& a, const Var& b) {
    VIDEDIT_CHECK(a.value().same_shape(b.value()), ShapeError, "add: shape mismatch");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        for (int pi = 0; pi < 2; ++pi) {
            Node& p = *n.parents[pi];
            if (!p.requires_grad) continue;
            detail::accum(p, n.grad);
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    VIDEDIT_CHECK(a.value().same_shape(b.value()), ShapeError, "sub: shape mismatch");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) detail::accum(*n.parents[0], n.grad);
        Node& pb = *n.parents[1];
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    VIDEDIT_CHECK(a.value().same_shape(b.value()), ShapeError, "mul: shape mismatch");
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) pa.grad[i] += n.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < n.grad.numel(); ++i) pb.grad[i] += n.grad[i] * pa.value[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return detail::make_op(std::move(out), {a}, [s](Node& n) {
        Node& p = *n.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) p.grad[i] += s * n.grad[i];
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        detail::accum(*n.parents[0], n.grad);
    });
}

inline Var silu(const Var& a) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) {
        const double x = out[i];
        out[i] = x / (1.0 + std::exp(-x));
    }
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            const double x = p.value[i];
            const double sig = 1.0 / (1.0 + std::exp(-x));
            p.grad[i] += n.grad[i] * sig * (1.0 + x * (1.0 - sig));
        }
    });
}

// Sum of all elements -> scalar [1].
inline Var sum(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a.value().numel(); ++i) s += a.value()[i];
    return detail::make_op(Tensor({1}, {s}), {a}, [](Node& n) {
        Node& p = *n.parents[0];
        p.ensure_grad();
        const double g = n.grad[0];
        for (int64_t i = 0; i < p.grad.numel(); ++i) p.grad[i] += g;
    });
}

// Sum of squared differences -> scalar. The guidance energy in one op keeps
// graphs small on the editing hot path.
inline Var sum_sq_diff(const Var& a, const Var& b) {
    VIDEDIT_CHECK(a.value().same_shape(b.value()), ShapeError, "sum_sq_diff: shape mismatch");
    double s = 0.0;
    for (int64_t i = 0; i < a.value().numel(); ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    return detail::make_op(Tensor({1}, {s}), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        const double g = n.grad[0];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < pa.grad.numel(); ++i)
                pa.grad[i] += 2.0 * g * (pa.value[i] - pb.value[i]);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int64_t i = 0; i < pb.grad.numel(); ++i)
                pb.grad[i] -= 2.0 * g * (pa.value[i] - pb.value[i]);
        }
    });
}

inline Var mean_sq_diff(const Var& a, const Var& b) {
    return scale(sum_sq_diff(a, b), 1.0 / static_cast<double>(a.value().numel()));
}

// Numerically stable -log softmax(logits)[target] for a [1, K] logit row.
inline Var cross_entropy_logits(const Var& logits, int target) {
    const int k = logits.value().dim(1);
    VIDEDIT_CHECK(logits.value().dim(0) == 1, ShapeError, "cross_entropy_logits: expects [1, K]");
    VIDEDIT_CHECK(target >= 0 && target < k, ParameterError, "cross_entropy_logits: bad target");
    double mx = logits.value()[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits.value()[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(logits.value()[j] - mx);
    const double loss = std::log(z) + mx - logits.value()[target];
    return detail::make_op(Tensor({1}, {loss}), {logits}, [k, target, mx, z](Node& n) {
        Node& p = *n.parents[0];
        p.ensure_grad();
        const double g = n.grad[0];
        for (int j = 0; j < k; ++j) {
            const double soft = std::exp(p.value[j] - mx) / z;
            p.grad[j] += g * (soft - (j == target ? 1.0 : 0.0));
        }
    });
}

// ---------------------------------------------------------------------------
// matrix ops (token matrices are [N, C] row-major)

inline Var matmul(const Var& a, const Var& b) {
    const int m = a.value().dim(0), k = a.value().dim(1);
    const int k2 = b.value().dim(0), n = b.value().dim(1);
    VIDEDIT_CHECK(k == k2, ShapeError, "matmul: inner dimension mismatch");
    Tensor out({m, n});
    as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
    return detail::make_op(std::move(out), {a, b}, [m, k, n](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        CMapRM g(nd.grad.data(), m, n);
        if (pa.requires_grad) {
            pa.ensure_grad();
            MapRM(pa.grad.data(), m, k).noalias() += g * as_mat(pb.value, k, n).transpose();
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            MapRM(pb.grad.data(), k, n).noalias() += as_mat(pa.value, m, k).transpose() * g;
        }
    });
}

// x [N, din] * W^T [din, dout] + b -> [N, dout]
inline Var linear(const Var& x, const Var& w, const Var& b) {
    const int n = x.value().dim(0), din = x.value().dim(1);
    const int dout = w.value().dim(0);
    VIDEDIT_CHECK(w.value().dim(1) == din, ShapeError, "linear: weight shape mismatch");
    VIDEDIT_CHECK(b.value().numel() == dout, ShapeError, "linear: bias shape mismatch");
    Tensor out({n, dout});
    as_mat(out, n, dout).noalias() =
        as_mat(x.value(), n, din) * as_mat(w.value(), dout, din).transpose();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < dout; ++j) out.at(i, j) += b.value()[j];
    return detail::make_op(std::move(out), {x, w, b}, [n, din, dout](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pw = *nd.parents[1];
        Node& pb = *nd.parents[2];
        CMapRM g(nd.grad.data(), n, dout);
        if (px.requires_grad) {
            px.ensure_grad();
            MapRM(px.grad.data(), n, din).noalias() += g * as_mat(pw.value, dout, din);
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            MapRM(pw.grad.data(), dout, din).noalias() +=
                g.transpose() * as_mat(px.value, n, din);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dout; ++j) pb.grad[j] += nd.grad.at(i, j);
        }
    });
}

// Gathers rows of a [V, C] table into [n, C]; backward scatters.
inline Var select_rows(const Var& table, const std::vector<int>& rows) {
    const int v = table.value().dim(0), c = table.value().dim(1);
    Tensor out({static_cast<int>(rows.size()), c});
    for (size_t i = 0; i < rows.size(); ++i) {
        VIDEDIT_CHECK(rows[i] >= 0 && rows[i] < v, ParameterError, "select_rows: index out of range");
        std::copy(table.value().data() + static_cast<int64_t>(rows[i]) * c,
                  table.value().data() + static_cast<int64_t>(rows[i] + 1) * c,
                  out.data() + static_cast<int64_t>(i) * c);
    }
    return detail::make_op(std::move(out), {table}, [rows, c](Node& nd) {
        Node& p = *nd.parents[0];
        p.ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < c; ++j)
                p.grad[static_cast<int64_t>(rows[i]) * c + j] +=
                    nd.grad[static_cast<int64_t>(i) * c + j];
    });
}

inline Var transpose(const Var& a) {
    const int m = a.value().dim(0), n = a.value().dim(1);
    Tensor out({n, m});
    as_mat(out, n, m).noalias() = as_mat(a.value(), m, n).transpose();
    return detail::make_op(std::move(out), {a}, [m, n](Node& nd) {
        Node& p = *nd.parents[0];
        p.ensure_grad();
        MapRM(p.grad.data(), m, n).noalias() += CMapRM(nd.grad.data(), n, m).transpose();
    });
}

inline Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a.value().reshaped(shape);
    return detail::make_op(std::move(out), {a}, [](Node& nd) {
        Node& p = *nd.parents[0];
        p.ensure_grad();
        for (int64_t i = 0; i < nd.grad.numel(); ++i) p.grad[i] += nd.grad[i];
    });
}

// Row-wise softmax over [N, M].
inline Var softmax_rows(const Var& a) {
    const int n = a.value().dim(0), m = a.value().dim(1);
    Tensor out = a.value();
    for (int i = 0; i < n; ++i) {
        double mx = out.at(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, out.at(i, j));
        double s = 0.0;
        for (int j = 0; j < m; ++j) {
            const double e = std::exp(out.at(i, j) - mx);
            out.at(i, j) = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < m; ++j) out.at(i, j) *= inv;
    }
    return detail::make_op(std::move(out), {a}, [n, m](Node& nd) {
        Node& p = *nd.parents[0];
        p.ensure_grad();
        for (int i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < m; ++j) dot += nd.grad.at(i, j) * nd.value.at(i, j);
            for (int j = 0; j < m; ++j)
                p.grad.at(i, j) += (nd.grad.at(i, j) - dot) * nd.value.at(i, j);
        }
    });
}

// Per-row normalization with affine parameters (layer norm over the channel
// axis of a token matrix [N, C]).
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const int n = x.value().dim(0), c = x.value().dim(1);
    VIDEDIT_CHECK(gamma.value().numel() == c && beta.value().numel() == c, ShapeError,
                  "layer_norm_rows: affine shape mismatch");
    Tensor out({n, c});
    Tensor xhat({n, c});
    Tensor inv_std({n});
    for (int i = 0; i < n; ++i) {
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += x.value().at(i, j);
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = x.value().at(i, j) - mean;
            var += d * d;
        }
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[i] = is;
        for (int j = 0; j < c; ++j) {
            const double h = (x.value().at(i, j) - mean) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = h * gamma.value()[j] + beta.value()[j];
        }
    }
    return detail::make_op(
        std::move(out), {x, gamma, beta},
        [n, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& nd) {
            Node& px = *nd.parents[0];
            Node& pg = *nd.parents[1];
            Node& pb = *nd.parents[2];
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j) pg.grad[j] += nd.grad.at(i, j) * xhat.at(i, j);
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j) pb.grad[j] += nd.grad.at(i, j);
            }
            if (px.requires_grad) {
                px.ensure_grad();
                const Tensor& gamma_v = pg.value;
                for (int i = 0; i < n; ++i) {
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const double dh = nd.grad.at(i, j) * gamma_v[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat.at(i, j);
                    }
                    const double inv_c = 1.0 / c;
                    for (int j = 0; j < c; ++j) {
                        const double dh = nd.grad.at(i, j) * gamma_v[j];
                        px.grad.at(i, j) += inv_std[i] * (dh - inv_c * sum_dh -
                                                          xhat.at(i, j) * inv_c * sum_dh_h);
                    }
                }
            }
        });
}

// Group norm over a [C, H, W] map.
inline Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups,
                      double eps = 1e-5) {
    const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    VIDEDIT_CHECK(c % groups == 0, ParameterError, "group_norm: channels not divisible by groups");
    VIDEDIT_CHECK(gamma.value().numel() == c && beta.value().numel() == c, ShapeError,
                  "group_norm: affine shape mismatch");
    const int cg = c / groups;
    const int64_t spatial = static_cast<int64_t>(h) * w;
    const int64_t gsize = cg * spatial;
    Tensor out({c, h, w});
    Tensor xhat({c, h, w});
    Tensor inv_std({groups});
    for (int g = 0; g < groups; ++g) {
        const double* px = x.value().data() + g * gsize;
        double mean = 0.0;
        for (int64_t i = 0; i < gsize; ++i) mean += px[i];
        mean /= static_cast<double>(gsize);
        double var = 0.0;
        for (int64_t i = 0; i < gsize; ++i) {
            const double d = px[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(gsize);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[g] = is;
        double* ph = xhat.data() + g * gsize;
        double* po = out.data() + g * gsize;
        for (int64_t i = 0; i < gsize; ++i) {
            ph[i] = (px[i] - mean) * is;
            const int ch = g * cg + static_cast<int>(i / spatial);
            po[i] = ph[i] * gamma.value()[ch] + beta.value()[ch];
        }
    }
    return detail::make_op(
        std::move(out), {x, gamma, beta},
        [c, h, w, groups, cg, spatial, gsize, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](Node& nd) {
            Node& px = *nd.parents[0];
            Node& pg = *nd.parents[1];
            Node& pb = *nd.parents[2];
            if (pg.requires_grad || pb.requires_grad) {
                if (pg.requires_grad) pg.ensure_grad();
                if (pb.requires_grad) pb.ensure_grad();
                for (int ch = 0; ch < c; ++ch) {
                    const int64_t base = static_cast<int64_t>(ch) * spatial;
                    for (int64_t i = 0; i < spatial; ++i) {
                        if (pg.requires_grad) pg.grad[ch] += nd.grad[base + i] * xhat[base + i];
                        if (pb.requires_grad) pb.grad[ch] += nd.grad[base + i];
                    }
                }
            }
            if (px.requires_grad) {
                px.ensure_grad();
                const Tensor& gamma_v = pg.value;
                for (int g = 0; g < groups; ++g) {
                    const int64_t base = g * gsize;
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (int64_t i = 0; i < gsize; ++i) {
                        const int ch = g * cg + static_cast<int>(i / spatial);
                        const double dh = nd.grad[base + i] * gamma_v[ch];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[base + i];
                    }
                    const double inv_n = 1.0 / static_cast<double>(gsize);
                    for (int64_t i = 0; i < gsize; ++i) {
                        const int ch = g * cg + static_cast<int>(i / spatial);
                        const double dh = nd.grad[base + i] * gamma_v[ch];
                        px.grad[base + i] += inv_std[g] * (dh - inv_n * sum_dh -
                                                           xhat[base + i] * inv_n * sum_dh_h);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// concatenation

inline Var concat_rows(const std::vector<Var>& parts) {
    VIDEDIT_CHECK(!parts.empty(), ParameterError, "concat_rows: empty list");
    const int c = parts[0].value().dim(1);
    int n = 0;
    for (const auto& p : parts) {
        VIDEDIT_CHECK(p.value().dim(1) == c, ShapeError, "concat_rows: column mismatch");
        n += p.value().dim(0);
    }
    Tensor out({n, c});
    int row = 0;
    std::vector<int> row_of(parts.size());
    for (size_t i = 0; i < parts.size(); ++i) {
        row_of[i] = row;
        const Tensor& t = parts[i].value();
        std::copy(t.data(), t.data() + t.numel(), out.data() + static_cast<int64_t>(row) * c);
        row += t.dim(0);
    }
    return detail::make_op(std::move(out), parts, [c, row_of](Node& nd) {
        for (size_t i = 0; i < nd.parents.size(); ++i) {
            Node& p = *nd.parents[i];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            const int64_t off = static_cast<int64_t>(row_of[i]) * c;
            for (int64_t j = 0; j < p.grad.numel(); ++j) p.grad[j] += nd.grad[off + j];
        }
    });
}

inline Var concat_channels(const Var& a, const Var& b) {
    const int ca = a.value().dim(0), h = a.value().dim(1), w = a.value().dim(2);
    const int cb = b.value().dim(0);
    VIDEDIT_CHECK(b.value().dim(1) == h && b.value().dim(2) == w, ShapeError,
                  "concat_channels: spatial mismatch");
    Tensor out({ca + cb, h, w});
    std::copy(a.value().data(), a.value().data() + a.value().numel(), out.data());
    std::copy(b.value().data(), b.value().data() + b.value().numel(),
              out.data() + a.value().numel());
    return detail::make_op(std::move(out), {a, b}, [](Node& nd) {
        Node& pa = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (int64_t i = 0; i < pa.grad.numel(); ++i) pa.grad[i] += nd.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            const int64_t off = pa.value.numel();
            for (int64_t i = 0; i < pb.grad.numel(); ++i) pb.grad[i] += nd.grad[off + i];
        }
    });
}

// ---------------------------------------------------------------------------
// spatial ops ([C, H, W] maps)

namespace detail {

// 3x3 im2col with zero padding: rows are (cin, ky, kx), one column per output
// pixel at the given stride.
inline void im2col3x3(const Tensor& x, int stride, Tensor& col, int& oh, int& ow) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    oh = (h - 1) / stride + 1;
    ow = (w - 1) / stride + 1;
    const int64_t n = static_cast<int64_t>(oh) * ow;
    col = Tensor({c * 9, static_cast<int>(n)});
    double* out = col.data();
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky;
                    const bool row_ok = iy >= 0 && iy < h;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx;
                        *out++ = (row_ok && ix >= 0 && ix < w) ? x.at(ci, iy, ix) : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im3x3(const Tensor& col, int stride, Tensor& dx) {
    const int c = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
    const int oh = (h - 1) / stride + 1;
    const int ow = (w - 1) / stride + 1;
    const double* in = col.data();
    for (int ci = 0; ci < c; ++ci) {
        for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky;
                    const bool row_ok = iy >= 0 && iy < h;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx;
                        if (row_ok && ix >= 0 && ix < w) dx.at(ci, iy, ix) += *in;
                        ++in;
                    }
                }
            }
        }
    }
}

}  // namespace detail

// 3x3 convolution with zero padding. Backward re-runs im2col on the saved
// input instead of keeping the column matrix alive (the column matrices of a
// whole denoiser graph would dominate memory).
inline Var conv3x3(const Var& x, const Var& w, const Var& b, int stride = 1) {
    const int cin = x.value().dim(0);
    const int cout = w.value().dim(0);
    VIDEDIT_CHECK(w.value().dim(1) == cin && w.value().dim(2) == 3 && w.value().dim(3) == 3,
                  ShapeError, "conv3x3: weight shape mismatch");
    VIDEDIT_CHECK(b.value().numel() == cout, ShapeError, "conv3x3: bias shape mismatch");
    Tensor col;
    int oh = 0, ow = 0;
    detail::im2col3x3(x.value(), stride, col, oh, ow);
    const int n = oh * ow;
    const int k = cin * 9;
    Tensor out({cout, oh, ow});
    as_mat(out, cout, n).noalias() = as_mat(w.value(), cout, k) * as_mat(col, k, n);
    for (int co = 0; co < cout; ++co) {
        const double bias = b.value()[co];
        double* p = out.data() + static_cast<int64_t>(co) * n;
        for (int i = 0; i < n; ++i) p[i] += bias;
    }
    return detail::make_op(std::move(out), {x, w, b}, [stride, cin, cout, oh, ow, k, n](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pw = *nd.parents[1];
        Node& pb = *nd.parents[2];
        CMapRM g(nd.grad.data(), cout, n);
        if (pw.requires_grad || px.requires_grad) {
            Tensor col;
            int oh2, ow2;
            detail::im2col3x3(px.value, stride, col, oh2, ow2);
            if (pw.requires_grad) {
                pw.ensure_grad();
                MapRM(pw.grad.data(), cout, k).noalias() += g * as_mat(col, k, n).transpose();
            }
            if (px.requires_grad) {
                px.ensure_grad();
                Tensor dcol({k, n});
                as_mat(dcol, k, n).noalias() = as_mat(pw.value, cout, k).transpose() * g;
                detail::col2im3x3(dcol, stride, px.grad);
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int co = 0; co < cout; ++co) {
                const double* p = nd.grad.data() + static_cast<int64_t>(co) * n;
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += p[i];
                pb.grad[co] += s;
            }
        }
    });
}

// 1x1 convolution (channel mixing), used for skip merges.
inline Var conv1x1(const Var& x, const Var& w, const Var& b) {
    const int cin = x.value().dim(0), h = x.value().dim(1), ww = x.value().dim(2);
    const int cout = w.value().dim(0);
    VIDEDIT_CHECK(w.value().dim(1) == cin, ShapeError, "conv1x1: weight shape mismatch");
    const int n = h * ww;
    Tensor out({cout, h, ww});
    as_mat(out, cout, n).noalias() = as_mat(w.value(), cout, cin) * as_mat(x.value(), cin, n);
    for (int co = 0; co < cout; ++co) {
        const double bias = b.value()[co];
        double* p = out.data() + static_cast<int64_t>(co) * n;
        for (int i = 0; i < n; ++i) p[i] += bias;
    }
    return detail::make_op(std::move(out), {x, w, b}, [cin, cout, n](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pw = *nd.parents[1];
        Node& pb = *nd.parents[2];
        CMapRM g(nd.grad.data(), cout, n);
        if (px.requires_grad) {
            px.ensure_grad();
            MapRM(px.grad.data(), cin, n).noalias() +=
                as_mat(pw.value, cout, cin).transpose() * g;
        }
        if (pw.requires_grad) {
            pw.ensure_grad();
            MapRM(pw.grad.data(), cout, cin).noalias() += g * as_mat(px.value, cin, n).transpose();
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int co = 0; co < cout; ++co) {
                const double* p = nd.grad.data() + static_cast<int64_t>(co) * n;
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += p[i];
                pb.grad[co] += s;
            }
        }
    });
}

// [C, H, W] + row vector [1, C] broadcast over the spatial axes.
inline Var add_channel_bias(const Var& x, const Var& bias_row) {
    const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    VIDEDIT_CHECK(bias_row.value().numel() == c, ShapeError, "add_channel_bias: width mismatch");
    const int64_t spatial = static_cast<int64_t>(h) * w;
    Tensor out = x.value();
    for (int ci = 0; ci < c; ++ci) {
        const double bv = bias_row.value()[ci];
        double* p = out.data() + ci * spatial;
        for (int64_t i = 0; i < spatial; ++i) p[i] += bv;
    }
    return detail::make_op(std::move(out), {x, bias_row}, [c, spatial](Node& nd) {
        Node& px = *nd.parents[0];
        Node& pb = *nd.parents[1];
        if (px.requires_grad) detail::accum(px, nd.grad);
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                const double* g = nd.grad.data() + ci * spatial;
                double s = 0.0;
                for (int64_t i = 0; i < spatial; ++i) s += g[i];
                pb.grad[ci] += s;
            }
        }
    });
}

inline Var upsample_nearest2x(const Var& x) {
    const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx)
                out.at(ci, y, xx) = x.value().at(ci, y / 2, xx / 2);
    return detail::make_op(std::move(out), {x}, [c, h, w](Node& nd) {
        Node& p = *nd.parents[0];
        p.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    p.grad.at(ci, y / 2, xx / 2) += nd.grad.at(ci, y, xx);
    });
}

// [C, H, W] -> [H*W, C] token matrix.
inline Var to_tokens(const Var& x) {
    const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    const int n = h * w;
    Tensor out({n, c});
    as_mat(out, n, c).noalias() = as_mat(x.value(), c, n).transpose();
    return detail::make_op(std::move(out), {x}, [c, n](Node& nd) {
        Node& p = *nd.parents[0];
        p.ensure_grad();
        MapRM(p.grad.data(), c, n).noalias() += CMapRM(nd.grad.data(), n, c).transpose();
    });
}

// [H*W, C] -> [C, H, W].
inline Var to_spatial(const Var& x, int h, int w) {
    const int n = x.value().dim(0), c = x.value().dim(1);
    VIDEDIT_CHECK(n == h * w, ShapeError, "to_spatial: token count mismatch");
    Tensor out({c, h, w});
    as_mat(out, c, n).noalias() = as_mat(x.value(), n, c).transpose();
    return detail::make_op(std::move(out), {x}, [c, n](Node& nd) {
        Node& p = *nd.parents[0];
        p.ensure_grad();
        MapRM(p.grad.data(), n, c).noalias() += CMapRM(nd.grad.data(), c, n).transpose();
    });
}

}  // namespace videdit::ag
