#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "maria/rng.hpp"

namespace maria {

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(std::span<const size_t> shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
struct TensorImpl {
    std::vector<size_t> shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until backward touches this tensor
    bool requires_grad = false;

    size_t numel() const { return values.size(); }
    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
        return grad;
    }
};
} // namespace detail

// Dense row-major tensor of doubles. Copies share storage (the autodiff
// graph needs aliasing); clone() makes an independent deep copy.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->values.assign(product(t.impl_->shape), 0.0);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(std::vector<size_t> shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.impl_->values.begin(), t.impl_->values.end(), v);
        return t;
    }

    static Tensor from(std::vector<size_t> shape, std::vector<double> values,
                       bool requires_grad = false) {
        if (product(shape) != values.size())
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        Tensor t;
        t.impl_->shape = std::move(shape);
        t.impl_->values = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar_of(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    static Tensor randn(std::vector<size_t> shape, Rng& rng, double stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& v : t.impl_->values) v = stddev * rng.normal();
        return t;
    }

    const std::vector<size_t>& shape() const { return impl_->shape; }
    size_t numel() const { return impl_->numel(); }
    size_t ndim() const { return impl_->shape.size(); }

    size_t rows() const {
        require_2d();
        return impl_->shape[0];
    }
    size_t cols() const {
        require_2d();
        return impl_->shape[1];
    }

    std::vector<double>& values() { return impl_->values; }
    const std::vector<double>& values() const { return impl_->values; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (impl_->grad.empty())
            throw std::runtime_error("tensor has no gradient (run backward first)");
        return impl_->grad;
    }
    std::vector<double>& ensure_grad() const { return impl_->ensure_grad(); }
    void zero_grad() const { impl_->grad.assign(impl_->values.size(), 0.0); }
    void drop_grad() const { impl_->grad.clear(); }

    double scalar() const {
        if (numel() != 1)
            throw DimensionError("expected scalar tensor, got shape " + shape_str(impl_->shape));
        return impl_->values[0];
    }

    double at(size_t r, size_t c) const {
        require_2d();
        return impl_->values[r * impl_->shape[1] + c];
    }
    double& at(size_t r, size_t c) {
        require_2d();
        return impl_->values[r * impl_->shape[1] + c];
    }

    Tensor clone() const {
        Tensor t;
        *t.impl_ = *impl_;
        return t;
    }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    detail::TensorImpl* impl() const { return impl_.get(); }

    static size_t product(std::span<const size_t> shape) {
        return std::accumulate(shape.begin(), shape.end(), size_t{1}, std::multiplies<>());
    }

private:
    void require_2d() const {
        if (impl_->shape.size() != 2)
            throw DimensionError("expected 2-d tensor, got shape " + shape_str(impl_->shape));
    }
    std::shared_ptr<detail::TensorImpl> impl_;
};

// Define-by-run gradient tape. One per thread; rebuilt every forward pass
// and cleared by backward().
class Tape {
public:
    static Tape& active() {
        thread_local Tape tape;
        return tape;
    }

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    void run_backward_and_clear() {
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
        ops_.clear();
    }

    void clear() { ops_.clear(); }
    size_t size() const { return ops_.size(); }

    bool grad_enabled() const { return grad_enabled_; }
    void set_grad_enabled(bool on) { grad_enabled_ = on; }

private:
    std::vector<std::function<void()>> ops_;
    bool grad_enabled_ = true;
};

// Scoped inference mode: ops built inside do not join the tape.
struct NoGrad {
    NoGrad() : prev_(Tape::active().grad_enabled()) { Tape::active().set_grad_enabled(false); }
    ~NoGrad() { Tape::active().set_grad_enabled(prev_); }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    bool prev_;
};

namespace detail {
inline bool track(const Tensor& a) { return Tape::active().grad_enabled() && a.requires_grad(); }
inline bool track(const Tensor& a, const Tensor& b) {
    return Tape::active().grad_enabled() && (a.requires_grad() || b.requires_grad());
}
} // namespace detail

// ---- ops -------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()));
    const size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n}, detail::track(a, b));
    {
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        double* pc = out.values().data();
        for (size_t i = 0; i < m; ++i)
            for (size_t p = 0; p < k; ++p) {
                const double aip = pa[i * k + p];
                const double* brow = pb + p * n;
                double* crow = pc + i * n;
                for (size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
            }
    }
    if (out.requires_grad()) {
        Tape::active().record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            const size_t m = a.rows(), k = a.cols(), n = b.cols();
            if (a.requires_grad()) {
                auto& ga = a.ensure_grad();
                const double* pb = b.values().data();
                for (size_t i = 0; i < m; ++i)
                    for (size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
                        ga[i * k + p] += acc;
                    }
            }
            if (b.requires_grad()) {
                auto& gb = b.ensure_grad();
                const double* pa = a.values().data();
                for (size_t p = 0; p < k; ++p)
                    for (size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (size_t i = 0; i < m; ++i) acc += pa[i * k + p] * g[i * n + j];
                        gb[p * n + j] += acc;
                    }
            }
        });
    }
    return out;
}

// a * b^T without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
        throw DimensionError("matmul_nt shape mismatch: " + shape_str(a.shape()) + " * " +
                             shape_str(b.shape()) + "^T");
    const size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros({m, n}, detail::track(a, b));
    {
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        double* pc = out.values().data();
        for (size_t i = 0; i < m; ++i)
            for (size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (size_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
                pc[i * n + j] = acc;
            }
    }
    if (out.requires_grad()) {
        Tape::active().record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            const size_t m = a.rows(), k = a.cols(), n = b.rows();
            if (a.requires_grad()) {
                auto& ga = a.ensure_grad();
                const double* pb = b.values().data();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        for (size_t p = 0; p < k; ++p) ga[i * k + p] += gij * pb[j * k + p];
                    }
            }
            if (b.requires_grad()) {
                auto& gb = b.ensure_grad();
                const double* pa = a.values().data();
                for (size_t i = 0; i < m; ++i)
                    for (size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        for (size_t p = 0; p < k; ++p) gb[j * k + p] += gij * pa[i * k + p];
                    }
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape(), detail::track(a, b));
    for (size_t i = 0; i < a.numel(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
    if (out.requires_grad()) {
        Tape::active().record([a, b, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (a.requires_grad()) {
                auto& ga = a.ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto& gb = b.ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        });
    }
    return out;
}

// x [t x d] + row broadcast over every row. Row may be [d] or [1 x d].
inline Tensor add_row(const Tensor& x, const Tensor& row) {
    const size_t d = x.cols();
    if (row.numel() != d)
        throw DimensionError("add_row width mismatch: " + shape_str(x.shape()) + " vs " +
                             shape_str(row.shape()));
    const size_t t = x.rows();
    Tensor out = Tensor::zeros(x.shape(), detail::track(x, row));
    for (size_t i = 0; i < t; ++i)
        for (size_t j = 0; j < d; ++j)
            out.values()[i * d + j] = x.values()[i * d + j] + row.values()[j];
    if (out.requires_grad()) {
        Tape::active().record([x, row, out, t, d]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            if (x.requires_grad()) {
                auto& gx = x.ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (row.requires_grad()) {
                auto& gr = row.ensure_grad();
                for (size_t i = 0; i < t; ++i)
                    for (size_t j = 0; j < d; ++j) gr[j] += g[i * d + j];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape(), detail::track(x));
    for (size_t i = 0; i < x.numel(); ++i) out.values()[i] = c * x.values()[i];
    if (out.requires_grad()) {
        Tape::active().record([x, out, c]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
        });
    }
    return out;
}

// Adds a constant (non-differentiated) matrix, entries may be -inf.
inline Tensor add_const(const Tensor& x, const std::vector<double>& c) {
    if (c.size() != x.numel())
        throw DimensionError("add_const size mismatch: " + shape_str(x.shape()) + " vs " +
                             std::to_string(c.size()) + " entries");
    Tensor out = Tensor::zeros(x.shape(), detail::track(x));
    for (size_t i = 0; i < x.numel(); ++i) out.values()[i] = x.values()[i] + c[i];
    if (out.requires_grad()) {
        Tape::active().record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape(), detail::track(x));
    for (size_t i = 0; i < x.numel(); ++i) out.values()[i] = x.values()[i] > 0.0 ? x.values()[i] : 0.0;
    if (out.requires_grad()) {
        Tape::active().record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
                if (x.values()[i] > 0.0) gx[i] += g[i];
        });
    }
    return out;
}

// Row-wise softmax of (logits + mask), mask entries in {0, -inf}. A row
// whose entries are all -inf yields an all-zero row instead of NaN: a fully
// masked token must contribute nothing.
inline Tensor masked_softmax(const Tensor& logits, const std::vector<double>& additive_mask) {
    if (logits.ndim() != 2)
        throw DimensionError("masked_softmax expects 2-d logits, got " + shape_str(logits.shape()));
    if (additive_mask.size() != logits.numel())
        throw DimensionError("masked_softmax mask size mismatch: " + shape_str(logits.shape()) +
                             " vs " + std::to_string(additive_mask.size()) + " entries");
    const size_t t = logits.rows(), n = logits.cols();
    const double neg_inf = -std::numeric_limits<double>::infinity();
    Tensor out = Tensor::zeros(logits.shape(), detail::track(logits));
    for (size_t i = 0; i < t; ++i) {
        double m = neg_inf;
        for (size_t j = 0; j < n; ++j) {
            const double v = logits.values()[i * n + j] + additive_mask[i * n + j];
            if (v > m) m = v;
        }
        if (m == neg_inf) continue; // fully masked row stays zero
        double s = 0.0;
        for (size_t j = 0; j < n; ++j) {
            const double e = std::exp(logits.values()[i * n + j] + additive_mask[i * n + j] - m);
            out.values()[i * n + j] = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (size_t j = 0; j < n; ++j) out.values()[i * n + j] *= inv;
    }
    if (out.requires_grad()) {
        Tape::active().record([logits, out, t, n]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            const auto& y = out.values();
            auto& gx = logits.ensure_grad();
            for (size_t i = 0; i < t; ++i) {
                double dot = 0.0;
                for (size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (size_t j = 0; j < n; ++j)
                    gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        });
    }
    return out;
}

// Per-row layer normalization with learned gain and bias (both width d).
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    const size_t t = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d)
        throw DimensionError("layer_norm gain/bias width mismatch: " + shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape(), detail::track(x) || detail::track(gain, bias));
    std::vector<double> inv_std(t), means(t);
    for (size_t i = 0; i < t; ++i) {
        const double* xr = x.values().data() + i * d;
        double mu = 0.0;
        for (size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        means[i] = mu;
        inv_std[i] = istd;
        for (size_t j = 0; j < d; ++j)
            out.values()[i * d + j] = (xr[j] - mu) * istd * gain.values()[j] + bias.values()[j];
    }
    if (out.requires_grad()) {
        Tape::active().record([x, gain, bias, out, means, inv_std, t, d]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            for (size_t i = 0; i < t; ++i) {
                const double* xr = x.values().data() + i * d;
                const double mu = means[i], istd = inv_std[i];
                if (gain.requires_grad()) {
                    auto& gg = gain.ensure_grad();
                    for (size_t j = 0; j < d; ++j)
                        gg[j] += g[i * d + j] * (xr[j] - mu) * istd;
                }
                if (bias.requires_grad()) {
                    auto& gb = bias.ensure_grad();
                    for (size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
                }
                if (x.requires_grad()) {
                    auto& gx = x.ensure_grad();
                    // dL/dxhat
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mu) * istd;
                        const double dxhat = g[i * d + j] * gain.values()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const double dd = static_cast<double>(d);
                    for (size_t j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mu) * istd;
                        const double dxhat = g[i * d + j] * gain.values()[j];
                        gx[i * d + j] +=
                            istd * (dxhat - sum_dxhat / dd - xhat * sum_dxhat_xhat / dd);
                    }
                }
            }
        });
    }
    return out;
}

// Lookup of one table row as a [1 x d] tensor; gradient scatters back.
inline Tensor gather_row(const Tensor& table, size_t row) {
    const size_t d = table.cols();
    if (row >= table.rows())
        throw DimensionError("gather_row index " + std::to_string(row) + " out of range for " +
                             shape_str(table.shape()));
    Tensor out = Tensor::zeros({1, d}, detail::track(table));
    for (size_t j = 0; j < d; ++j) out.values()[j] = table.values()[row * d + j];
    if (out.requires_grad()) {
        Tape::active().record([table, out, row, d]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gt = table.ensure_grad();
            for (size_t j = 0; j < d; ++j) gt[row * d + j] += g[j];
        });
    }
    return out;
}

// Stack parts along rows; every part must share the column width.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows of zero parts");
    const size_t d = parts.front().cols();
    size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.cols() != d)
            throw DimensionError("concat_rows width mismatch: " + shape_str(p.shape()) +
                                 " vs width " + std::to_string(d));
        total += p.rows();
        rg = rg || p.requires_grad();
    }
    rg = rg && Tape::active().grad_enabled();
    Tensor out = Tensor::zeros({total, d}, rg);
    size_t at = 0;
    for (const Tensor& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + at);
        at += p.numel();
    }
    if (rg) {
        Tape::active().record([parts, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            size_t at = 0;
            for (const Tensor& p : parts) {
                if (p.requires_grad()) {
                    auto& gp = p.ensure_grad();
                    for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[at + i];
                }
                at += p.numel();
            }
        });
    }
    return out;
}

// Stack parts along columns (multi-head concatenation).
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols of zero parts");
    const size_t t = parts.front().rows();
    size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        if (p.rows() != t)
            throw DimensionError("concat_cols row mismatch: " + shape_str(p.shape()) + " vs " +
                                 std::to_string(t) + " rows");
        total += p.cols();
        rg = rg || p.requires_grad();
    }
    rg = rg && Tape::active().grad_enabled();
    Tensor out = Tensor::zeros({t, total}, rg);
    size_t col = 0;
    for (const Tensor& p : parts) {
        const size_t pc = p.cols();
        for (size_t i = 0; i < t; ++i)
            for (size_t j = 0; j < pc; ++j)
                out.values()[i * total + col + j] = p.values()[i * pc + j];
        col += pc;
    }
    if (rg) {
        Tape::active().record([parts, out, t, total]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            size_t col = 0;
            for (const Tensor& p : parts) {
                const size_t pc = p.cols();
                if (p.requires_grad()) {
                    auto& gp = p.ensure_grad();
                    for (size_t i = 0; i < t; ++i)
                        for (size_t j = 0; j < pc; ++j) gp[i * pc + j] += g[i * total + col + j];
                }
                col += pc;
            }
        });
    }
    return out;
}

inline Tensor flatten(const Tensor& x) {
    Tensor out = Tensor::zeros({1, x.numel()}, detail::track(x));
    std::copy(x.values().begin(), x.values().end(), out.values().begin());
    if (out.requires_grad()) {
        Tape::active().record([x, out]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

// Zeroes the rows whose observed flag is false; gradients there are
// discarded as well. Keeps unobserved token rows at exact zero across
// residual connections.
inline Tensor zero_rows(const Tensor& x, const std::vector<uint8_t>& observed) {
    const size_t t = x.rows(), d = x.cols();
    if (observed.size() != t)
        throw DimensionError("zero_rows flag count " + std::to_string(observed.size()) +
                             " does not match " + shape_str(x.shape()));
    Tensor out = Tensor::zeros(x.shape(), detail::track(x));
    for (size_t i = 0; i < t; ++i)
        if (observed[i])
            for (size_t j = 0; j < d; ++j) out.values()[i * d + j] = x.values()[i * d + j];
    if (out.requires_grad()) {
        Tape::active().record([x, out, observed, t, d]() mutable {
            if (!out.has_grad()) return;
            const auto& g = out.grad();
            auto& gx = x.ensure_grad();
            for (size_t i = 0; i < t; ++i)
                if (observed[i])
                    for (size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j];
        });
    }
    return out;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::from({1}, {s}, detail::track(x));
    if (out.requires_grad()) {
        Tape::active().record([x, out]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0];
            auto& gx = x.ensure_grad();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        });
    }
    return out;
}

// Mean negative log-softmax of the target class, max-subtraction
// stabilized. Optional per-class weights; the weighted mean divides by the
// sum of sample weights.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<double>& class_weights = {}) {
    const size_t batch = logits.rows(), classes = logits.cols();
    if (classes < 2)
        throw DimensionError("cross_entropy needs >= 2 classes, got " + shape_str(logits.shape()));
    if (targets.size() != batch)
        throw DimensionError("cross_entropy target count " + std::to_string(targets.size()) +
                             " does not match " + shape_str(logits.shape()));
    for (int tgt : targets)
        if (tgt < 0 || static_cast<size_t>(tgt) >= classes)
            throw std::out_of_range("cross_entropy target index " + std::to_string(tgt) +
                                    " out of range [0, " + std::to_string(classes) + ")");
    std::vector<double> weights(batch, 1.0);
    if (!class_weights.empty()) {
        if (class_weights.size() != classes)
            throw DimensionError("cross_entropy class weight count mismatch");
        for (size_t i = 0; i < batch; ++i) weights[i] = class_weights[targets[i]];
    }
    double weight_sum = 0.0;
    for (double w : weights) weight_sum += w;

    double loss = 0.0;
    std::vector<double> softmax(batch * classes);
    for (size_t i = 0; i < batch; ++i) {
        const double* row = logits.values().data() + i * classes;
        double m = row[0];
        for (size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
        double s = 0.0;
        for (size_t c = 0; c < classes; ++c) {
            const double e = std::exp(row[c] - m);
            softmax[i * classes + c] = e;
            s += e;
        }
        const double lse = m + std::log(s);
        loss += weights[i] * (lse - row[targets[i]]);
        const double inv = 1.0 / s;
        for (size_t c = 0; c < classes; ++c) softmax[i * classes + c] *= inv;
    }
    loss /= weight_sum;

    Tensor out = Tensor::from({1}, {loss}, detail::track(logits));
    if (out.requires_grad()) {
        Tape::active().record(
            [logits, out, targets, weights, weight_sum, softmax, batch, classes]() mutable {
                if (!out.has_grad()) return;
            const double g = out.grad()[0];
                auto& gx = logits.ensure_grad();
                for (size_t i = 0; i < batch; ++i) {
                    const double wi = weights[i] / weight_sum;
                    for (size_t c = 0; c < classes; ++c) {
                        const double indicator = (static_cast<size_t>(targets[i]) == c) ? 1.0 : 0.0;
                        gx[i * classes + c] += g * wi * (softmax[i * classes + c] - indicator);
                    }
                }
            });
    }
    return out;
}

// Reverse pass from a scalar loss; populates grads of every requires_grad
// ancestor and clears the tape.
inline void backward(Tensor loss) {
    if (loss.numel() != 1)
        throw DimensionError("backward expects a scalar loss, got shape " +
                             shape_str(loss.shape()));
    loss.ensure_grad()[0] = 1.0;
    Tape::active().run_backward_and_clear();
}

} // namespace maria
