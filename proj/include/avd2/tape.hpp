#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "avd2/matrix.hpp"

namespace avd2 {

/// Reverse-mode differentiation tape over dense matrices.
///
/// Every primitive computes its value eagerly and, when recording, appends a
/// backward closure. `backward` replays the closures in exact reverse order;
/// gradients accumulate additively, so a node used twice (e.g. a tied
/// embedding) receives the sum of both contributions.
class Tape {
  public:
    using Node = std::size_t;

    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const noexcept { return recording_; }
    std::size_t op_count() const noexcept { return ops_.size(); }

    /// Leaf referring to external storage; it must outlive the tape.
    Node leaf(const Matrix& external) {
        nodes_.push_back(Slot{{}, &external, {}, false});
        return nodes_.size() - 1;
    }

    /// Leaf owning its value.
    Node constant(Matrix value) {
        nodes_.push_back(Slot{std::move(value), nullptr, {}, false});
        return nodes_.size() - 1;
    }

    const Matrix& value(Node n) const {
        const auto& s = nodes_[n];
        return s.ext ? *s.ext : s.own;
    }

    bool has_grad(Node n) const { return nodes_[n].has_grad; }

    /// Gradient of `n`, zero-shaped if nothing reached it.
    Matrix grad(Node n) const {
        const auto& s = nodes_[n];
        if (s.has_grad) return s.grad;
        const auto& v = value(n);
        return Matrix(v.rows(), v.cols());
    }

    void backward(Node out, const Matrix& seed) {
        for (auto& s : nodes_) {
            s.grad = Matrix();
            s.has_grad = false;
        }
        accumulate(out, seed);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    // ---- primitives -------------------------------------------------------

    Node matmul(Node a, Node b) {
        Matrix out;
        matmul_into(value(a), value(b), out);
        return push(std::move(out), [this, a, b, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            matmul_nt_into(g, value(b), grad_ref(a), true);
            matmul_tn_into(value(a), g, grad_ref(b), true);
        });
    }

    /// a · bᵀ
    Node matmul_nt(Node a, Node b) {
        Matrix out;
        matmul_nt_into(value(a), value(b), out);
        return push(std::move(out), [this, a, b, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            matmul_into(g, value(b), grad_ref(a), true);
            matmul_tn_into(g, value(a), grad_ref(b), true);
        });
    }

    Node add(Node a, Node b) {
        Matrix out = value(a);
        out += value(b);
        return push(std::move(out), [this, a, b, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            grad_ref(a) += g;
            grad_ref(b) += g;
        });
    }

    /// x + 1×n row vector broadcast over rows.
    Node add_row(Node x, Node bias) {
        Matrix out = value(x);
        const Matrix& bv = value(bias);
        for (std::size_t i = 0; i < out.rows(); ++i)
            for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
        return push(std::move(out), [this, x, bias, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            grad_ref(x) += g;
            Matrix& gb = grad_ref(bias);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
        });
    }

    Node scale(Node x, double s) {
        Matrix out = value(x);
        out *= s;
        return push(std::move(out), [this, x, s, o = next()] {
            if (!nodes_[o].has_grad) return;
            Matrix g = nodes_[o].grad;
            g *= s;
            grad_ref(x) += g;
        });
    }

    /// Elementwise product of equal-shaped matrices.
    Node mul(Node a, Node b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        Matrix out(av.rows(), av.cols());
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = av.data()[i] * bv.data()[i];
        return push(std::move(out), [this, a, b, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            Matrix& ga = grad_ref(a);
            Matrix& gb = grad_ref(b);
            const Matrix& av2 = value(a);
            const Matrix& bv2 = value(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.data()[i] += g.data()[i] * bv2.data()[i];
                gb.data()[i] += g.data()[i] * av2.data()[i];
            }
        });
    }

    /// Rows `ids` of `table`.
    Node gather_rows(Node table, std::vector<std::size_t> ids) {
        const Matrix& t = value(table);
        Matrix out(ids.size(), t.cols());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto src = t.row(ids[i]);
            std::copy(src.begin(), src.end(), out.row(i).begin());
        }
        return push(std::move(out), [this, table, ids = std::move(ids), o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            Matrix& gt = grad_ref(table);
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j) gt(ids[i], j) += g(i, j);
        });
    }

    Node slice_cols(Node x, std::size_t begin, std::size_t count) {
        const Matrix& xv = value(x);
        Matrix out(xv.rows(), count);
        for (std::size_t i = 0; i < xv.rows(); ++i)
            for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
        return push(std::move(out), [this, x, begin, count, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            Matrix& gx = grad_ref(x);
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < count; ++j) gx(i, begin + j) += g(i, j);
        });
    }

    Node concat_cols(std::vector<Node> parts) {
        std::size_t rows = value(parts.front()).rows(), cols = 0;
        for (Node p : parts) cols += value(p).cols();
        Matrix out(rows, cols);
        std::size_t off = 0;
        for (Node p : parts) {
            const Matrix& pv = value(p);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
            off += pv.cols();
        }
        return push(std::move(out), [this, parts = std::move(parts), o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            std::size_t off2 = 0;
            for (Node p : parts) {
                Matrix& gp = grad_ref(p);
                for (std::size_t i = 0; i < gp.rows(); ++i)
                    for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += g(i, off2 + j);
                off2 += gp.cols();
            }
        });
    }

    /// Row softmax. With `causal`, entry (i, j) for j > i is excluded.
    Node softmax_rows(Node x, bool causal = false) {
        const Matrix& xv = value(x);
        Matrix out(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < xv.rows(); ++i) {
            const std::size_t lim = causal ? std::min(i + 1, xv.cols()) : xv.cols();
            double mx = -INFINITY;
            for (std::size_t j = 0; j < lim; ++j) mx = std::max(mx, xv(i, j));
            double z = 0.0;
            for (std::size_t j = 0; j < lim; ++j) z += (out(i, j) = std::exp(xv(i, j) - mx));
            for (std::size_t j = 0; j < lim; ++j) out(i, j) /= z;
        }
        return push(std::move(out), [this, x, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            const Matrix& p = value(o);
            Matrix& gx = grad_ref(x);
            for (std::size_t i = 0; i < p.rows(); ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < p.cols(); ++j) dot += g(i, j) * p(i, j);
                for (std::size_t j = 0; j < p.cols(); ++j) gx(i, j) += p(i, j) * (g(i, j) - dot);
            }
        });
    }

    /// Per-row layer normalization with gain/bias rows.
    Node layer_norm(Node x, Node gain, Node bias, double eps = 1e-5) {
        const Matrix& xv = value(x);
        const Matrix& gv = value(gain);
        const Matrix& bv = value(bias);
        const std::size_t n = xv.cols();
        Matrix out(xv.rows(), n), xhat(xv.rows(), n);
        std::vector<double> inv_std(xv.rows());
        for (std::size_t i = 0; i < xv.rows(); ++i) {
            double mu = 0.0;
            for (std::size_t j = 0; j < n; ++j) mu += xv(i, j);
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mu) * (xv(i, j) - mu);
            var /= static_cast<double>(n);
            inv_std[i] = 1.0 / std::sqrt(var + eps);
            for (std::size_t j = 0; j < n; ++j) {
                xhat(i, j) = (xv(i, j) - mu) * inv_std[i];
                out(i, j) = gv(0, j) * xhat(i, j) + bv(0, j);
            }
        }
        return push(std::move(out),
                    [this, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), o = next()] {
                        if (!nodes_[o].has_grad) return;
                        const Matrix& g = nodes_[o].grad;
                        const Matrix& gv2 = value(gain);
                        Matrix& gx = grad_ref(x);
                        Matrix& gg = grad_ref(gain);
                        Matrix& gb = grad_ref(bias);
                        const std::size_t cols = g.cols();
                        std::vector<double> dxhat(cols);
                        for (std::size_t i = 0; i < g.rows(); ++i) {
                            double mean_d = 0.0, mean_dx = 0.0;
                            for (std::size_t j = 0; j < cols; ++j) {
                                gg(0, j) += g(i, j) * xhat(i, j);
                                gb(0, j) += g(i, j);
                                dxhat[j] = g(i, j) * gv2(0, j);
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat(i, j);
                            }
                            mean_d /= static_cast<double>(cols);
                            mean_dx /= static_cast<double>(cols);
                            for (std::size_t j = 0; j < cols; ++j)
                                gx(i, j) += inv_std[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx);
                        }
                    });
    }

    /// GELU, tanh approximation.
    Node gelu(Node x) {
        const Matrix& xv = value(x);
        Matrix out(xv.rows(), xv.cols());
        for (std::size_t i = 0; i < xv.size(); ++i) out.data()[i] = gelu_value(xv.data()[i]);
        return push(std::move(out), [this, x, o = next()] {
            if (!nodes_[o].has_grad) return;
            const Matrix& g = nodes_[o].grad;
            const Matrix& xv2 = value(x);
            Matrix& gx = grad_ref(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx.data()[i] += g.data()[i] * gelu_derivative(xv2.data()[i]);
        });
    }

    static double gelu_value(double v) {
        constexpr double c = 0.7978845608028654; // sqrt(2/pi)
        return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
    }

    static double gelu_derivative(double v) {
        constexpr double c = 0.7978845608028654;
        const double u = c * (v + 0.044715 * v * v * v);
        const double t = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    }

  private:
    struct Slot {
        Matrix own;
        const Matrix* ext;
        Matrix grad;
        bool has_grad;
    };

    Node next() const { return nodes_.size(); }

    Node push(Matrix value, std::function<void()> back) {
        nodes_.push_back(Slot{std::move(value), nullptr, {}, false});
        if (recording_) ops_.push_back(std::move(back));
        return nodes_.size() - 1;
    }

    Matrix& grad_ref(Node n) {
        auto& s = nodes_[n];
        if (!s.has_grad) {
            const auto& v = value(n);
            s.grad = Matrix(v.rows(), v.cols());
            s.has_grad = true;
        }
        return s.grad;
    }

    void accumulate(Node n, const Matrix& g) { grad_ref(n) += g; }

    std::vector<Slot> nodes_;
    std::vector<std::function<void()>> ops_;
    bool recording_;
};

} // namespace avd2
