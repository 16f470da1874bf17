#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <vector>

#include "taskbias/tensor.hpp"

namespace taskbias::ops {

// ----------------------------- raw kernels -----------------------------

namespace kernels {

// C[m,n] += A[m,k] * B[k,n]; rows of C are written by exactly one worker.
inline void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    const std::size_t work = m * k * n;
    auto body = [&](std::size_t r0, std::size_t r1) {
        for (std::size_t i = r0; i < r1; ++i) {
            double* crow = c + i * n;
            const double* arow = a + i * k;
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                const double* brow = b + kk * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    };
    if (work > 100000) parallel_for(m, body);
    else body(0, m);
}

inline void transpose_into(const double* x, double* out, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = x[i * cols + j];
}

}  // namespace kernels

// ----------------------------- recording helpers -----------------------------

namespace detail {

inline bool any_tracked(std::initializer_list<const Tensor*> ins) {
    for (const Tensor* t : ins)
        if (t->tracked()) return true;
    return false;
}

inline void maybe_record(std::initializer_list<const Tensor*> ins, Tensor& out, std::function<void()> backward) {
    GradientTape* tape = active_tape();
    if (!tape || !any_tracked(ins)) return;
    out.node()->tracked = true;
    std::vector<std::shared_ptr<Tensor::Node>> in_nodes;
    in_nodes.reserve(ins.size());
    for (const Tensor* t : ins) in_nodes.push_back(t->node());
    tape->record(std::move(in_nodes), out.node(), std::move(backward));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DataError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline std::size_t last_dim(const Tensor& t) {
    if (t.ndim() == 0) throw DataError("operation needs at least one axis");
    return t.shape().back();
}

}  // namespace detail

// ----------------------------- elementwise -----------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record({&a, &b}, out, [an, bn, on, n] {
        const double* g = on->grad.data();
        if (an->tracked)
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i];
        if (bn->tracked)
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i];
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] - b.ptr()[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record({&a, &b}, out, [an, bn, on, n] {
        const double* g = on->grad.data();
        if (an->tracked)
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i];
        if (bn->tracked)
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] -= g[i];
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record({&a, &b}, out, [an, bn, on, n] {
        const double* g = on->grad.data();
        if (an->tracked)
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += g[i] * bn->value[i];
        if (bn->tracked)
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] += g[i] * an->value[i];
    });
    return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + c;
    auto an = a.node(), on = out.node();
    detail::maybe_record({&a}, out, [an, on, n] {
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    });
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * c;
    auto an = a.node(), on = out.node();
    detail::maybe_record({&a}, out, [an, on, n, c] {
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * c;
    });
    return out;
}

// y = x * s, s a learnable scalar tensor
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) throw DataError("scale_by: scale must be a scalar tensor");
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    const double sv = s.ptr()[0];
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] * sv;
    auto xn = x.node(), sn = s.node(), on = out.node();
    detail::maybe_record({&x, &s}, out, [xn, sn, on, n, sv] {
        const double* g = on->grad.data();
        if (xn->tracked)
            for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g[i] * sv;
        if (sn->tracked) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += g[i] * xn->value[i];
            sn->grad[0] += acc;
        }
    });
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = x.ptr()[i] > 0.0 ? x.ptr()[i] : 0.0;
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, n] {
        for (std::size_t i = 0; i < n; ++i)
            if (xn->value[i] > 0.0) xn->grad[i] += on->grad[i];
    });
    return out;
}

// exact GELU: x * Phi(x)
inline Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.ptr()[i];
        out.ptr()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, n] {
        for (std::size_t i = 0; i < n; ++i) {
            const double v = xn->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
            xn->grad[i] += on->grad[i] * (cdf + v * pdf);
        }
    });
    return out;
}

inline Tensor exp(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) out.ptr()[i] = std::exp(x.ptr()[i]);
    out.check_finite("exp output");
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, n] {
        for (std::size_t i = 0; i < n; ++i) xn->grad[i] += on->grad[i] * on->value[i];
    });
    return out;
}

// ----------------------------- reductions -----------------------------

inline Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    auto xn = x.node(), on = out.node();
    const std::size_t n = x.size();
    detail::maybe_record({&x}, out, [xn, on, n] {
        const double g = on->grad[0];
        for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
    });
    return out;
}

inline Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw DataError("mean of empty tensor");
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    const std::size_t n = x.size();
    Tensor out = Tensor::scalar(acc / static_cast<double>(n));
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, n] {
        const double g = on->grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
    });
    return out;
}

// ----------------------------- matmul family -----------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw DataError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    kernels::mm_acc(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record({&a, &b}, out, [an, bn, on, m, k, n] {
        const double* g = on->grad.data();
        if (an->tracked) {
            // dA += g @ B^T
            std::vector<double> bt(k * n);
            kernels::transpose_into(bn->value.data(), bt.data(), k, n);
            kernels::mm_acc(g, bt.data(), an->grad.data(), m, n, k);
        }
        if (bn->tracked) {
            // dB += A^T @ g
            std::vector<double> at(m * k);
            kernels::transpose_into(an->value.data(), at.data(), m, k);
            kernels::mm_acc(at.data(), g, bn->grad.data(), k, m, n);
        }
    });
    return out;
}

// C = A @ B^T; a[m,k], b[n,k] -> [m,n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
        throw DataError("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::zeros({m, n});
    std::vector<double> bt(k * n);
    kernels::transpose_into(b.ptr(), bt.data(), n, k);
    kernels::mm_acc(a.ptr(), bt.data(), out.ptr(), m, k, n);
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record({&a, &b}, out, [an, bn, on, m, k, n] {
        const double* g = on->grad.data();
        if (an->tracked) kernels::mm_acc(g, bn->value.data(), an->grad.data(), m, n, k);
        if (bn->tracked) {
            // dB += g^T @ A
            std::vector<double> gt(m * n);
            kernels::transpose_into(g, gt.data(), m, n);
            kernels::mm_acc(gt.data(), an->value.data(), bn->grad.data(), n, m, k);
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& x) {
    if (x.ndim() != 2) throw DataError("transpose expects a 2-D tensor");
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    kernels::transpose_into(x.ptr(), out.ptr(), m, n);
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, m, n] {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) xn->grad[i * n + j] += on->grad[j * m + i];
    });
    return out;
}

// x[m,n] + bias[n] broadcast over rows
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    if (x.ndim() != 2 || bias.size() != x.dim(1))
        throw DataError("add_rowwise: bias length " + std::to_string(bias.size()) + " vs columns " +
                        std::to_string(x.ndim() == 2 ? x.dim(1) : 0));
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.ptr()[i * n + j] = x.ptr()[i * n + j] + bias.ptr()[j];
    auto xn = x.node(), bn = bias.node(), on = out.node();
    detail::maybe_record({&x, &bias}, out, [xn, bn, on, m, n] {
        const double* g = on->grad.data();
        if (xn->tracked)
            for (std::size_t i = 0; i < m * n; ++i) xn->grad[i] += g[i];
        if (bn->tracked)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) bn->grad[j] += g[i * n + j];
    });
    return out;
}

// ----------------------------- normalization -----------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t n = detail::last_dim(x);
    if (gamma.size() != n || beta.size() != n) throw DataError("layer_norm: gamma/beta length mismatch");
    const std::size_t rows = x.size() / n;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_sigma(rows), mu(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xp = x.ptr() + r * n;
        double m = 0.0;
        for (std::size_t j = 0; j < n; ++j) m += xp[j];
        m /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xp[j] - m) * (xp[j] - m);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        mu[r] = m;
        inv_sigma[r] = is;
        double* op = out.ptr() + r * n;
        for (std::size_t j = 0; j < n; ++j) op[j] = (xp[j] - m) * is * gamma.ptr()[j] + beta.ptr()[j];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    detail::maybe_record({&x, &gamma, &beta}, out, [xn, gn, bn, on, rows, n, mu, inv_sigma] {
        const double* g = on->grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* xp = xn->value.data() + r * n;
            const double* gr = g + r * n;
            const double is = inv_sigma[r], m = mu[r];
            double sum_dg = 0.0, sum_dgx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double xhat = (xp[j] - m) * is;
                const double dy_g = gr[j] * gn->value[j];
                sum_dg += dy_g;
                sum_dgx += dy_g * xhat;
                if (gn->tracked) gn->grad[j] += gr[j] * xhat;
                if (bn->tracked) bn->grad[j] += gr[j];
            }
            if (xn->tracked) {
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    const double xhat = (xp[j] - m) * is;
                    const double dy_g = gr[j] * gn->value[j];
                    xn->grad[r * n + j] += is * (dy_g - inv_n * sum_dg - xhat * inv_n * sum_dgx);
                }
            }
        }
    });
    return out;
}

// rows scaled to unit Euclidean norm
inline Tensor l2_normalize_rows(const Tensor& x) {
    if (x.ndim() != 2) throw DataError("l2_normalize_rows expects a 2-D tensor");
    const std::size_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_norm(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* xp = x.ptr() + r * n;
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += xp[j] * xp[j];
        if (s == 0.0) throw NumericError("cannot normalize a zero vector");
        const double iv = 1.0 / std::sqrt(s);
        inv_norm[r] = iv;
        for (std::size_t j = 0; j < n; ++j) out.ptr()[r * n + j] = xp[j] * iv;
    }
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, m, n, inv_norm] {
        for (std::size_t r = 0; r < m; ++r) {
            const double* g = on->grad.data() + r * n;
            const double* y = on->value.data() + r * n;
            double yg = 0.0;
            for (std::size_t j = 0; j < n; ++j) yg += y[j] * g[j];
            for (std::size_t j = 0; j < n; ++j) xn->grad[r * n + j] += (g[j] - y[j] * yg) * inv_norm[r];
        }
    });
    return out;
}

// ----------------------------- softmax / cross-entropy -----------------------------

// softmax over the last axis, computed with max-subtraction
inline Tensor softmax(const Tensor& logits) {
    const std::size_t n = detail::last_dim(logits);
    if (n == 0) throw DataError("softmax over an empty axis");
    const std::size_t rows = logits.size() / n;
    Tensor out = Tensor::zeros(logits.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* lp = logits.ptr() + r * n;
        double* op = out.ptr() + r * n;
        double mx = lp[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lp[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            op[j] = std::exp(lp[j] - mx);
            z += op[j];
        }
        const double iz = 1.0 / z;
        for (std::size_t j = 0; j < n; ++j) op[j] *= iz;
    }
    out.check_finite("softmax output");
    auto ln = logits.node(), on = out.node();
    detail::maybe_record({&logits}, out, [ln, on, rows, n] {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* g = on->grad.data() + r * n;
            const double* y = on->value.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) ln->grad[r * n + j] += y[j] * (g[j] - dot);
        }
    });
    return out;
}

namespace detail {
// stable log-sum-exp of one row
inline double row_lse(const double* lp, std::size_t n) {
    double mx = lp[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, lp[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(lp[j] - mx);
    return mx + std::log(z);
}
}  // namespace detail

// -log softmax(logits)[target], logits 1-D
inline Tensor cross_entropy(const Tensor& logits, std::size_t target) {
    if (logits.ndim() != 1) throw DataError("cross_entropy expects 1-D logits");
    const std::size_t n = logits.size();
    if (n == 0) throw DataError("cross_entropy on empty logits");
    if (target >= n)
        throw DataError("cross_entropy: target " + std::to_string(target) + " out of range for " + std::to_string(n) +
                        " logits");
    const double lse = detail::row_lse(logits.ptr(), n);
    Tensor out = Tensor::scalar(lse - logits.ptr()[target]);
    out.check_finite("cross_entropy output");
    auto ln = logits.node(), on = out.node();
    detail::maybe_record({&logits}, out, [ln, on, n, target] {
        const double g = on->grad[0];
        const double lse = detail::row_lse(ln->value.data(), n);
        for (std::size_t j = 0; j < n; ++j) {
            const double p = std::exp(ln->value[j] - lse);
            ln->grad[j] += g * (p - (j == target ? 1.0 : 0.0));
        }
    });
    return out;
}

// mean row-wise cross-entropy; logits [m,n], one target per row
inline Tensor cross_entropy_rows(const Tensor& logits, std::vector<std::size_t> targets) {
    if (logits.ndim() != 2) throw DataError("cross_entropy_rows expects 2-D logits");
    const std::size_t m = logits.dim(0), n = logits.dim(1);
    if (targets.size() != m) throw DataError("cross_entropy_rows: one target per row required");
    double acc = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        if (targets[r] >= n) throw DataError("cross_entropy_rows: target out of range");
        acc += detail::row_lse(logits.ptr() + r * n, n) - logits.ptr()[r * n + targets[r]];
    }
    Tensor out = Tensor::scalar(acc / static_cast<double>(m));
    out.check_finite("cross_entropy_rows output");
    auto ln = logits.node(), on = out.node();
    detail::maybe_record({&logits}, out, [ln, on, m, n, targets = std::move(targets)] {
        const double g = on->grad[0] / static_cast<double>(m);
        for (std::size_t r = 0; r < m; ++r) {
            const double* lp = ln->value.data() + r * n;
            const double lse = detail::row_lse(lp, n);
            for (std::size_t j = 0; j < n; ++j) {
                const double p = std::exp(lp[j] - lse);
                ln->grad[r * n + j] += g * (p - (j == targets[r] ? 1.0 : 0.0));
            }
        }
    });
    return out;
}

// ----------------------------- data movement -----------------------------

inline Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw DataError("concat_rows of nothing");
    const std::size_t n = parts[0].ndim() == 2 ? parts[0].dim(1) : 0;
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2 || p.dim(1) != n) throw DataError("concat_rows: column mismatch");
        rows += p.dim(0);
    }
    Tensor out = Tensor::zeros({rows, n});
    std::size_t at = 0;
    for (const Tensor& p : parts) {
        std::memcpy(out.ptr() + at * n, p.ptr(), p.size() * sizeof(double));
        at += p.dim(0);
    }
    GradientTape* tape = active_tape();
    bool tracked = false;
    for (const Tensor& p : parts) tracked = tracked || p.tracked();
    if (tape && tracked) {
        out.node()->tracked = true;
        std::vector<std::shared_ptr<Tensor::Node>> in_nodes;
        for (const Tensor& p : parts) in_nodes.push_back(p.node());
        auto on = out.node();
        auto ins = in_nodes;
        tape->record(std::move(in_nodes), on, [ins, on, n] {
            std::size_t at = 0;
            for (auto& in : ins) {
                const std::size_t cnt = in->value.size();
                if (in->tracked)
                    for (std::size_t i = 0; i < cnt; ++i) in->grad[i] += on->grad[at * n + i];
                at += cnt / n;
            }
        });
    }
    return out;
}

inline Tensor concat_rows(std::initializer_list<Tensor> parts) {
    std::vector<Tensor> v(parts);
    return concat_rows(std::span<const Tensor>(v));
}

inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.ndim() != 2 || r1 > x.dim(0) || r0 > r1) throw DataError("slice_rows: bad range");
    const std::size_t n = x.dim(1), rows = r1 - r0;
    Tensor out = Tensor::zeros({rows, n});
    std::memcpy(out.ptr(), x.ptr() + r0 * n, rows * n * sizeof(double));
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, r0, rows, n] {
        for (std::size_t i = 0; i < rows * n; ++i) xn->grad[r0 * n + i] += on->grad[i];
    });
    return out;
}

// [r,n] -> [repeat*r, n], tiled in order
inline Tensor tile_rows(const Tensor& x, std::size_t repeat) {
    if (x.ndim() != 2) throw DataError("tile_rows expects a 2-D tensor");
    const std::size_t r = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({repeat * r, n});
    for (std::size_t t = 0; t < repeat; ++t) std::memcpy(out.ptr() + t * r * n, x.ptr(), r * n * sizeof(double));
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, repeat, r, n] {
        for (std::size_t t = 0; t < repeat; ++t)
            for (std::size_t i = 0; i < r * n; ++i) xn->grad[i] += on->grad[t * r * n + i];
    });
    return out;
}

// interleave per-example row blocks: a holds ra rows per example, b holds rb
inline Tensor concat_per_example(const Tensor& a, const Tensor& b, std::size_t ra, std::size_t rb) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) throw DataError("concat_per_example: column mismatch");
    if (ra == 0 || a.dim(0) % ra != 0) throw DataError("concat_per_example: bad block size for a");
    const std::size_t batch = a.dim(0) / ra;
    if (b.dim(0) != batch * rb) throw DataError("concat_per_example: example count mismatch");
    const std::size_t n = a.dim(1), j = ra + rb;
    Tensor out = Tensor::zeros({batch * j, n});
    for (std::size_t e = 0; e < batch; ++e) {
        std::memcpy(out.ptr() + (e * j) * n, a.ptr() + e * ra * n, ra * n * sizeof(double));
        std::memcpy(out.ptr() + (e * j + ra) * n, b.ptr() + e * rb * n, rb * n * sizeof(double));
    }
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record({&a, &b}, out, [an, bn, on, batch, ra, rb, n, j] {
        const double* g = on->grad.data();
        for (std::size_t e = 0; e < batch; ++e) {
            if (an->tracked)
                for (std::size_t i = 0; i < ra * n; ++i) an->grad[e * ra * n + i] += g[e * j * n + i];
            if (bn->tracked)
                for (std::size_t i = 0; i < rb * n; ++i) bn->grad[e * rb * n + i] += g[(e * j + ra) * n + i];
        }
    });
    return out;
}

// x[b*L + i] += pos[i]
inline Tensor add_positional(const Tensor& x, const Tensor& pos, std::size_t batch) {
    if (x.ndim() != 2 || pos.ndim() != 2 || x.dim(1) != pos.dim(1)) throw DataError("add_positional: column mismatch");
    const std::size_t n = x.dim(1), l = pos.dim(0);
    if (x.dim(0) != batch * l) throw DataError("add_positional: rows != batch * positions");
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < l * n; ++i) out.ptr()[b * l * n + i] = x.ptr()[b * l * n + i] + pos.ptr()[i];
    auto xn = x.node(), pn = pos.node(), on = out.node();
    detail::maybe_record({&x, &pos}, out, [xn, pn, on, batch, l, n] {
        const double* g = on->grad.data();
        if (xn->tracked)
            for (std::size_t i = 0; i < batch * l * n; ++i) xn->grad[i] += g[i];
        if (pn->tracked)
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < l * n; ++i) pn->grad[i] += g[b * l * n + i];
    });
    return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(0) != b.dim(0)) throw DataError("concat_cols: row mismatch");
    const std::size_t m = a.dim(0), na = a.dim(1), nb = b.dim(1);
    Tensor out = Tensor::zeros({m, na + nb});
    for (std::size_t i = 0; i < m; ++i) {
        std::memcpy(out.ptr() + i * (na + nb), a.ptr() + i * na, na * sizeof(double));
        std::memcpy(out.ptr() + i * (na + nb) + na, b.ptr() + i * nb, nb * sizeof(double));
    }
    auto an = a.node(), bn = b.node(), on = out.node();
    detail::maybe_record({&a, &b}, out, [an, bn, on, m, na, nb] {
        for (std::size_t i = 0; i < m; ++i) {
            if (an->tracked)
                for (std::size_t j = 0; j < na; ++j) an->grad[i * na + j] += on->grad[i * (na + nb) + j];
            if (bn->tracked)
                for (std::size_t j = 0; j < nb; ++j) bn->grad[i * nb + j] += on->grad[i * (na + nb) + na + j];
        }
    });
    return out;
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
    if (x.ndim() != 2 || c1 > x.dim(1) || c0 > c1) throw DataError("slice_cols: bad range");
    const std::size_t m = x.dim(0), n = x.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w});
    for (std::size_t i = 0; i < m; ++i) std::memcpy(out.ptr() + i * w, x.ptr() + i * n + c0, w * sizeof(double));
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, m, n, w, c0] {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) xn->grad[i * n + c0 + j] += on->grad[i * w + j];
    });
    return out;
}

// images flat [B, S, S, 3] -> [B*P, patch*patch*3], patches scanned row-major
inline Tensor extract_patches(const Tensor& images, std::size_t image_size, std::size_t patch) {
    if (patch == 0 || image_size % patch != 0) throw DataError("extract_patches: image size not divisible by patch size");
    const std::size_t px = image_size * image_size * 3;
    if (images.size() % px != 0) throw DataError("extract_patches: buffer size mismatch");
    const std::size_t batch = images.size() / px;
    const std::size_t grid = image_size / patch, pdim = patch * patch * 3;
    Tensor out = Tensor::zeros({batch * grid * grid, pdim});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t gy = 0; gy < grid; ++gy)
            for (std::size_t gx = 0; gx < grid; ++gx) {
                double* orow = out.ptr() + ((b * grid + gy) * grid + gx) * pdim;
                for (std::size_t py = 0; py < patch; ++py)
                    std::memcpy(orow + py * patch * 3,
                                images.ptr() + b * px + ((gy * patch + py) * image_size + gx * patch) * 3,
                                patch * 3 * sizeof(double));
            }
    auto in_node = images.node(), on = out.node();
    detail::maybe_record({&images}, out, [in_node, on, batch, image_size, patch, grid, pdim, px] {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t gy = 0; gy < grid; ++gy)
                for (std::size_t gx = 0; gx < grid; ++gx) {
                    const double* grow = on->grad.data() + ((b * grid + gy) * grid + gx) * pdim;
                    for (std::size_t py = 0; py < patch; ++py)
                        for (std::size_t q = 0; q < patch * 3; ++q)
                            in_node->grad[b * px + ((gy * patch + py) * image_size + gx * patch) * 3 + q] +=
                                grow[py * patch * 3 + q];
                }
    });
    return out;
}

inline Tensor gather_rows(const Tensor& x, std::vector<std::size_t> idx) {
    if (x.ndim() != 2) throw DataError("gather_rows expects a 2-D tensor");
    const std::size_t n = x.dim(1);
    for (std::size_t i : idx)
        if (i >= x.dim(0)) throw DataError("gather_rows: index out of range");
    Tensor out = Tensor::zeros({idx.size(), n});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.ptr() + r * n, x.ptr() + idx[r] * n, n * sizeof(double));
    auto xn = x.node(), on = out.node();
    const std::size_t rows = idx.size();
    detail::maybe_record({&x}, out, [xn, on, idx = std::move(idx), rows, n] {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t jj = 0; jj < n; ++jj) xn->grad[idx[r] * n + jj] += on->grad[r * n + jj];
    });
    return out;
}

// logits[b, j] = dot(rows[b], opts[b*n_opts + j])
inline Tensor block_dot(const Tensor& rows, const Tensor& opts, std::size_t n_opts) {
    if (rows.ndim() != 2 || opts.ndim() != 2 || rows.dim(1) != opts.dim(1))
        throw DataError("block_dot: dimension mismatch");
    const std::size_t batch = rows.dim(0), d = rows.dim(1);
    if (opts.dim(0) != batch * n_opts) throw DataError("block_dot: option block count mismatch");
    Tensor out = Tensor::zeros({batch, n_opts});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < n_opts; ++j) {
            double acc = 0.0;
            const double* rp = rows.ptr() + b * d;
            const double* op = opts.ptr() + (b * n_opts + j) * d;
            for (std::size_t c = 0; c < d; ++c) acc += rp[c] * op[c];
            out.ptr()[b * n_opts + j] = acc;
        }
    auto rn = rows.node(), pn = opts.node(), on = out.node();
    detail::maybe_record({&rows, &opts}, out, [rn, pn, on, batch, n_opts, d] {
        const double* g = on->grad.data();
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t j = 0; j < n_opts; ++j) {
                const double gv = g[b * n_opts + j];
                if (gv == 0.0) continue;
                if (rn->tracked)
                    for (std::size_t c = 0; c < d; ++c)
                        rn->grad[b * d + c] += gv * pn->value[(b * n_opts + j) * d + c];
                if (pn->tracked)
                    for (std::size_t c = 0; c < d; ++c)
                        pn->grad[(b * n_opts + j) * d + c] += gv * rn->value[b * d + c];
            }
    });
    return out;
}

// ----------------------------- attention -----------------------------

// [B*T, H*dh] -> flat [B*H, T, dh]
inline Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t tokens, std::size_t heads) {
    if (x.ndim() != 2 || x.dim(0) != batch * tokens || x.dim(1) % heads != 0)
        throw DataError("split_heads: dimension mismatch");
    const std::size_t dh = x.dim(1) / heads, width = x.dim(1);
    Tensor out = Tensor::zeros({batch * heads, tokens, dh});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                std::memcpy(out.ptr() + (((b * heads + h) * tokens) + t) * dh, x.ptr() + (b * tokens + t) * width + h * dh,
                            dh * sizeof(double));
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, batch, tokens, heads, dh, width] {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t c = 0; c < dh; ++c)
                        xn->grad[(b * tokens + t) * width + h * dh + c] +=
                            on->grad[(((b * heads + h) * tokens) + t) * dh + c];
    });
    return out;
}

// flat [B*H, T, dh] -> [B*T, H*dh]
inline Tensor merge_heads(const Tensor& x, std::size_t batch, std::size_t tokens, std::size_t heads) {
    if (x.ndim() != 3 || x.dim(0) != batch * heads || x.dim(1) != tokens) throw DataError("merge_heads: dimension mismatch");
    const std::size_t dh = x.dim(2), width = heads * dh;
    Tensor out = Tensor::zeros({batch * tokens, width});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < tokens; ++t)
            for (std::size_t h = 0; h < heads; ++h)
                std::memcpy(out.ptr() + (b * tokens + t) * width + h * dh, x.ptr() + (((b * heads + h) * tokens) + t) * dh,
                            dh * sizeof(double));
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, batch, tokens, heads, dh, width] {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < tokens; ++t)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t c = 0; c < dh; ++c)
                        xn->grad[(((b * heads + h) * tokens) + t) * dh + c] +=
                            on->grad[(b * tokens + t) * width + h * dh + c];
    });
    return out;
}

// masked scaled-dot-product attention probabilities.
// q, k: flat [B*H, T, dh]; valid_lens: per-example key count (empty = all T).
inline Tensor attention_probs(const Tensor& q, const Tensor& k, double scale, std::vector<std::size_t> valid_lens,
                              std::size_t heads) {
    if (q.ndim() != 3 || k.shape() != q.shape()) throw DataError("attention_probs: q/k shape mismatch");
    const std::size_t bh = q.dim(0), t = q.dim(1), dh = q.dim(2);
    if (bh % heads != 0) throw DataError("attention_probs: head count mismatch");
    if (!valid_lens.empty() && valid_lens.size() != bh / heads)
        throw DataError("attention_probs: one valid length per example required");
    Tensor out = Tensor::zeros({bh, t, t});
    auto fwd = [&](std::size_t g0, std::size_t g1) {
        std::vector<double> logits(t);
        for (std::size_t g = g0; g < g1; ++g) {
            const std::size_t len = valid_lens.empty() ? t : valid_lens[g / heads];
            const double* qb = q.ptr() + g * t * dh;
            const double* kb = k.ptr() + g * t * dh;
            double* ob = out.ptr() + g * t * t;
            for (std::size_t i = 0; i < t; ++i) {
                const double* qr = qb + i * dh;
                double mx = -1e300;
                for (std::size_t u = 0; u < len; ++u) {
                    double acc = 0.0;
                    const double* kr = kb + u * dh;
                    for (std::size_t c = 0; c < dh; ++c) acc += qr[c] * kr[c];
                    logits[u] = acc * scale;
                    mx = std::max(mx, logits[u]);
                }
                double z = 0.0;
                for (std::size_t u = 0; u < len; ++u) {
                    logits[u] = std::exp(logits[u] - mx);
                    z += logits[u];
                }
                double* orow = ob + i * t;
                const double iz = 1.0 / z;
                for (std::size_t u = 0; u < len; ++u) orow[u] = logits[u] * iz;
                for (std::size_t u = len; u < t; ++u) orow[u] = 0.0;
            }
        }
    };
    if (bh * t * t * dh > 100000) parallel_for(bh, fwd);
    else fwd(0, bh);
    auto qn = q.node(), kn = k.node(), on = out.node();
    detail::maybe_record({&q, &k}, out, [qn, kn, on, bh, t, dh, heads, scale, lens = std::move(valid_lens)] {
        std::vector<double> dlog(t);
        for (std::size_t g = 0; g < bh; ++g) {
            const std::size_t len = lens.empty() ? t : lens[g / heads];
            const double* qb = qn->value.data() + g * t * dh;
            const double* kb = kn->value.data() + g * t * dh;
            const double* pb = on->value.data() + g * t * t;
            const double* gb = on->grad.data() + g * t * t;
            for (std::size_t i = 0; i < t; ++i) {
                const double* prow = pb + i * t;
                const double* grow = gb + i * t;
                double dot = 0.0;
                for (std::size_t u = 0; u < len; ++u) dot += prow[u] * grow[u];
                for (std::size_t u = 0; u < len; ++u) dlog[u] = prow[u] * (grow[u] - dot) * scale;
                const double* qr = qb + i * dh;
                for (std::size_t u = 0; u < len; ++u) {
                    const double dv = dlog[u];
                    if (dv == 0.0) continue;
                    const double* kr = kb + u * dh;
                    if (qn->tracked)
                        for (std::size_t c = 0; c < dh; ++c) qn->grad[(g * t + i) * dh + c] += dv * kr[c];
                    if (kn->tracked)
                        for (std::size_t c = 0; c < dh; ++c) kn->grad[(g * t + u) * dh + c] += dv * qr[c];
                }
            }
        }
    });
    return out;
}

// out[g, i, :] = sum_u probs[g, i, u] * v[g, u, :]
inline Tensor attention_apply(const Tensor& probs, const Tensor& v) {
    if (probs.ndim() != 3 || v.ndim() != 3 || probs.dim(0) != v.dim(0) || probs.dim(2) != v.dim(1))
        throw DataError("attention_apply: shape mismatch");
    const std::size_t bh = probs.dim(0), t = probs.dim(1), dh = v.dim(2);
    Tensor out = Tensor::zeros({bh, t, dh});
    auto fwd = [&](std::size_t g0, std::size_t g1) {
        for (std::size_t g = g0; g < g1; ++g) {
            const double* pb = probs.ptr() + g * t * t;
            const double* vb = v.ptr() + g * t * dh;
            double* ob = out.ptr() + g * t * dh;
            for (std::size_t i = 0; i < t; ++i)
                for (std::size_t u = 0; u < t; ++u) {
                    const double p = pb[i * t + u];
                    if (p == 0.0) continue;
                    const double* vr = vb + u * dh;
                    double* orow = ob + i * dh;
                    for (std::size_t c = 0; c < dh; ++c) orow[c] += p * vr[c];
                }
        }
    };
    if (bh * t * t * dh > 100000) parallel_for(bh, fwd);
    else fwd(0, bh);
    auto pn = probs.node(), vn = v.node(), on = out.node();
    detail::maybe_record({&probs, &v}, out, [pn, vn, on, bh, t, dh] {
        for (std::size_t g = 0; g < bh; ++g) {
            const double* pb = pn->value.data() + g * t * t;
            const double* vb = vn->value.data() + g * t * dh;
            const double* gb = on->grad.data() + g * t * dh;
            for (std::size_t i = 0; i < t; ++i) {
                const double* grow = gb + i * dh;
                for (std::size_t u = 0; u < t; ++u) {
                    const double* vr = vb + u * dh;
                    if (pn->tracked) {
                        double acc = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) acc += grow[c] * vr[c];
                        pn->grad[g * t * t + i * t + u] += acc;
                    }
                    if (vn->tracked) {
                        const double p = pb[i * t + u];
                        if (p != 0.0)
                            for (std::size_t c = 0; c < dh; ++c) vn->grad[(g * t + u) * dh + c] += p * grow[c];
                    }
                }
            }
        }
    });
    return out;
}

// ----------------------------- pixel border prompt -----------------------------

// border positions of a size x size image, row-major
inline std::vector<std::pair<std::size_t, std::size_t>> border_positions(std::size_t size, std::size_t ps) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const std::size_t edge = std::min(std::min(y, x), std::min(size - 1 - y, size - 1 - x));
            if (edge < ps) out.emplace_back(y, x);
        }
    return out;
}

// images flat [B, S, S, 3]; phi [n_border, 3] added inside the border mask,
// result clamped to [0,1]; interior pixels are copied untouched.
inline Tensor add_border_clamped(const Tensor& images, const Tensor& phi, std::size_t image_size, std::size_t ps) {
    if (ps >= (image_size + 1) / 2 && ps != 0)
        throw DataError("border width " + std::to_string(ps) + " too large for image size " + std::to_string(image_size));
    const std::size_t px = image_size * image_size * 3;
    if (images.size() % px != 0) throw DataError("add_border_clamped: image buffer size mismatch");
    const std::size_t batch = images.size() / px;
    const auto pos = border_positions(image_size, ps);
    if (phi.size() != pos.size() * 3) throw DataError("add_border_clamped: phi size mismatch with border mask");
    Tensor out = Tensor::from_data(images.shape(), std::vector<double>(images.data().begin(), images.data().end()));
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < pos.size(); ++p) {
            const std::size_t base = b * px + (pos[p].first * image_size + pos[p].second) * 3;
            for (std::size_t c = 0; c < 3; ++c) {
                const double u = images.ptr()[base + c] + phi.ptr()[p * 3 + c];
                out.ptr()[base + c] = std::min(1.0, std::max(0.0, u));
            }
        }
    auto in_node = images.node(), pn = phi.node(), on = out.node();
    detail::maybe_record({&images, &phi}, out, [in_node, pn, on, batch, px, image_size, pos] {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < pos.size(); ++p) {
                const std::size_t base = b * px + (pos[p].first * image_size + pos[p].second) * 3;
                for (std::size_t c = 0; c < 3; ++c) {
                    const double u = in_node->value[base + c] + pn->value[p * 3 + c];
                    if (u <= 0.0 || u >= 1.0) continue;  // clamp is flat outside (0,1)
                    const double g = on->grad[base + c];
                    if (pn->tracked) pn->grad[p * 3 + c] += g;
                    if (in_node->tracked) in_node->grad[base + c] += g;
                }
            }
        if (in_node->tracked) {
            // interior pixels pass gradients straight through
            std::vector<bool> is_border(px / 3, false);
            for (const auto& yx : pos) is_border[yx.first * image_size + yx.second] = true;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t q = 0; q < px / 3; ++q) {
                    if (is_border[q]) continue;
                    for (std::size_t c = 0; c < 3; ++c) in_node->grad[b * px + q * 3 + c] += on->grad[b * px + q * 3 + c];
                }
        }
    });
    return out;
}

// ----------------------------- convolution blocks -----------------------------

// x flat [B, H, W, C] -> rows [(B*H*W), 9*C] of 3x3 neighborhoods, zero padded
inline Tensor im2col3x3(const Tensor& x, std::size_t batch, std::size_t h, std::size_t w, std::size_t c) {
    if (x.size() != batch * h * w * c) throw DataError("im2col3x3: buffer size mismatch");
    Tensor out = Tensor::zeros({batch * h * w, 9 * c});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                double* orow = out.ptr() + ((b * h + y) * w + xx) * 9 * c;
                std::size_t tap = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx, ++tap) {
                        const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(xx) + dx;
                        if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                        std::memcpy(orow + tap * c, x.ptr() + ((b * h + sy) * w + sx) * c, c * sizeof(double));
                    }
            }
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, batch, h, w, c] {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) {
                    const double* grow = on->grad.data() + ((b * h + y) * w + xx) * 9 * c;
                    std::size_t tap = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx, ++tap) {
                            const long sy = static_cast<long>(y) + dy, sx = static_cast<long>(xx) + dx;
                            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                            for (std::size_t ch = 0; ch < c; ++ch)
                                xn->grad[((b * h + sy) * w + sx) * c + ch] += grow[tap * c + ch];
                        }
                }
    });
    return out;
}

// x flat [B, H, W, C] -> [B, H/2, W/2, C]; ties keep the first maximum
inline Tensor maxpool2x2(const Tensor& x, std::size_t batch, std::size_t h, std::size_t w, std::size_t c) {
    if (h % 2 != 0 || w % 2 != 0 || x.size() != batch * h * w * c) throw DataError("maxpool2x2: bad dimensions");
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out = Tensor::zeros({batch * oh * ow, c});
    std::vector<std::size_t> argmax(batch * oh * ow * c);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double best = -1e300;
                    std::size_t best_at = 0;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t at = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                            if (x.ptr()[at] > best) {
                                best = x.ptr()[at];
                                best_at = at;
                            }
                        }
                    const std::size_t o = ((b * oh + y) * ow + xx) * c + ch;
                    out.ptr()[o] = best;
                    argmax[o] = best_at;
                }
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, argmax = std::move(argmax)] {
        for (std::size_t o = 0; o < argmax.size(); ++o) xn->grad[argmax[o]] += on->grad[o];
    });
    return out;
}

// x flat [B, HW, C] -> [B, C] mean over spatial positions
inline Tensor global_avg_pool(const Tensor& x, std::size_t batch, std::size_t hw, std::size_t c) {
    if (x.size() != batch * hw * c) throw DataError("global_avg_pool: buffer size mismatch");
    Tensor out = Tensor::zeros({batch, c});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) out.ptr()[b * c + ch] += x.ptr()[(b * hw + p) * c + ch];
    for (double& v : out.data()) v /= static_cast<double>(hw);
    auto xn = x.node(), on = out.node();
    detail::maybe_record({&x}, out, [xn, on, batch, hw, c] {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < hw; ++p)
                for (std::size_t ch = 0; ch < c; ++ch)
                    xn->grad[(b * hw + p) * c + ch] += on->grad[b * c + ch] / static_cast<double>(hw);
    });
    return out;
}

}  // namespace taskbias::ops
