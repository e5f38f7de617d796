#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pcreg/errors.hpp"

namespace pcreg {

// ============================================================================
// Cost metering
// ============================================================================
//
// FLOP accounting conventions (documented once, applied uniformly):
//   matmul (m,k)x(k,n)        2*m*k*n   (one multiply-add = 2 FLOPs)
//   elementwise add/sub/mul/div   1 per element
//   exp/log/sqrt                  1 per element
//   sigmoid 4, silu 5, softplus 3, zoh_phi 4 per element
//   softmax                       5 per element (max, sub, exp, sum, div)
//   layernorm                     8 per element
//   dwconv1d                      2*rows*cols*taps
//   gather/concat/slice/transpose 0 (data movement)
// Peak memory is the high-water mark of live Tensor payload bytes while a
// meter is active; Tensor construction/destruction updates it.

struct CostMeter {
    std::map<std::string, std::uint64_t> flops_by_op;
    std::uint64_t total_flops = 0;
    std::int64_t live_bytes = 0;
    std::uint64_t peak_bytes = 0;
};

namespace detail {
inline thread_local CostMeter* active_meter = nullptr;

inline void meter_flops(const char* op, std::uint64_t flops) {
    if (CostMeter* m = active_meter) {
        m->flops_by_op[op] += flops;
        m->total_flops += flops;
    }
}

inline void meter_bytes(std::int64_t delta) {
    if (CostMeter* m = active_meter) {
        m->live_bytes += delta;
        if (m->live_bytes > 0 && std::uint64_t(m->live_bytes) > m->peak_bytes)
            m->peak_bytes = std::uint64_t(m->live_bytes);
    }
}
}  // namespace detail

/// Activates a meter for the current thread. One trace at a time: nesting is
/// rejected so reports can never double-count.
class CostScope {
public:
    explicit CostScope(CostMeter& meter) {
        if (detail::active_meter != nullptr)
            throw DomainError("a cost meter is already active on this thread");
        detail::active_meter = &meter;
    }
    ~CostScope() { detail::active_meter = nullptr; }
    CostScope(const CostScope&) = delete;
    CostScope& operator=(const CostScope&) = delete;
};

// ============================================================================
// Tensor: dense row-major float64 matrix
// ============================================================================

class Tensor {
public:
    Tensor() = default;

    Tensor(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
        detail::meter_bytes(payload_bytes());
    }

    static Tensor full(std::size_t rows, std::size_t cols, double v) {
        Tensor t(rows, cols);
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor from_rows(std::size_t rows, std::size_t cols, std::vector<double> values) {
        if (values.size() != rows * cols) throw ShapeMismatch("from_rows: value count mismatch");
        Tensor t;
        t.rows_ = rows;
        t.cols_ = cols;
        t.data_ = std::move(values);
        detail::meter_bytes(t.payload_bytes());
        return t;
    }

    Tensor(const Tensor& o) : rows_(o.rows_), cols_(o.cols_), data_(o.data_) {
        detail::meter_bytes(payload_bytes());
    }

    Tensor(Tensor&& o) noexcept : rows_(o.rows_), cols_(o.cols_), data_(std::move(o.data_)) {
        o.rows_ = o.cols_ = 0;
        o.data_.clear();
    }

    Tensor& operator=(const Tensor& o) {
        if (this != &o) {
            detail::meter_bytes(-payload_bytes());
            rows_ = o.rows_;
            cols_ = o.cols_;
            data_ = o.data_;
            detail::meter_bytes(payload_bytes());
        }
        return *this;
    }

    Tensor& operator=(Tensor&& o) noexcept {
        if (this != &o) {
            detail::meter_bytes(-payload_bytes());
            rows_ = o.rows_;
            cols_ = o.cols_;
            data_ = std::move(o.data_);
            o.rows_ = o.cols_ = 0;
            o.data_.clear();
        }
        return *this;
    }

    ~Tensor() { detail::meter_bytes(-payload_bytes()); }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool is_scalar() const { return rows_ == 1 && cols_ == 1; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    double scalar() const {
        if (!is_scalar()) throw NonScalarOutput();
        return data_[0];
    }

private:
    std::int64_t payload_bytes() const { return std::int64_t(data_.size() * sizeof(double)); }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeMismatch(std::string(op) + ": operand shapes differ");
}
}  // namespace detail

inline bool has_non_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return true;
    return false;
}

// ============================================================================
// Kernels
// ============================================================================

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) throw ShapeMismatch("matmul: inner dimensions differ");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c(m, n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a(i, p);
            for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(p, j);
        }
    detail::meter_flops("matmul", 2ull * m * k * n);
    return c;
}

inline Tensor transpose(const Tensor& a) {
    Tensor t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + b[i];
    detail::meter_flops("add", a.size());
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] - b[i];
    detail::meter_flops("sub", a.size());
    return c;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] * b[i];
    detail::meter_flops("mul", a.size());
    return c;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] / b[i];
    detail::meter_flops("div", a.size());
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] * s;
    detail::meter_flops("scale", a.size());
    return c;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + s;
    detail::meter_flops("add_scalar", a.size());
    return c;
}

/// Adds a 1 x cols row vector to every row.
inline Tensor add_rows(const Tensor& a, const Tensor& v) {
    if (v.rows() != 1 || v.cols() != a.cols()) throw ShapeMismatch("add_rows: bias shape");
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j) + v(0, j);
    detail::meter_flops("add_rows", a.size());
    return c;
}

/// Multiplies row i by v[i] (v is rows x 1).
inline Tensor scale_rows(const Tensor& a, const Tensor& v) {
    if (v.cols() != 1 || v.rows() != a.rows()) throw ShapeMismatch("scale_rows: vector shape");
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j) * v(i, 0);
    detail::meter_flops("scale_rows", a.size());
    return c;
}

/// Multiplies column j by v[j] (v is 1 x cols).
inline Tensor scale_cols(const Tensor& a, const Tensor& v) {
    if (v.rows() != 1 || v.cols() != a.cols()) throw ShapeMismatch("scale_cols: vector shape");
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j) * v(0, j);
    detail::meter_flops("scale_cols", a.size());
    return c;
}

inline Tensor exp(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = std::exp(a[i]);
    detail::meter_flops("exp", a.size());
    return c;
}

inline Tensor log(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = std::log(a[i]);
    detail::meter_flops("log", a.size());
    return c;
}

inline Tensor sqrt(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = std::sqrt(a[i]);
    detail::meter_flops("sqrt", a.size());
    return c;
}

inline double sigmoid_scalar(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = sigmoid_scalar(a[i]);
    detail::meter_flops("sigmoid", 4ull * a.size());
    return c;
}

inline Tensor silu(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] * sigmoid_scalar(a[i]);
    detail::meter_flops("silu", 5ull * a.size());
    return c;
}

inline double softplus_scalar(double x) {
    // log(1 + e^x) without overflow; exact identity, not an approximation.
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline Tensor softplus(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = softplus_scalar(a[i]);
    detail::meter_flops("softplus", 3ull * a.size());
    return c;
}

/// phi(u) = (e^u - 1) / u, the zero-order-hold input factor. Below |u| = 1e-8
/// the series 1 + u/2 + u^2/6 takes over; the branch point keeps values and
/// derivatives continuous to double precision.
inline double zoh_phi_scalar(double u) {
    if (std::abs(u) < 1e-8) return 1.0 + u / 2.0 + u * u / 6.0;
    return std::expm1(u) / u;
}

inline double zoh_phi_grad_scalar(double u) {
    if (std::abs(u) < 1e-8) return 0.5 + u / 3.0 + u * u / 8.0;
    return (std::exp(u) * (u - 1.0) + 1.0) / (u * u);
}

inline Tensor zoh_phi(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = zoh_phi_scalar(a[i]);
    detail::meter_flops("zoh_phi", 4ull * a.size());
    return c;
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) c[i] = std::clamp(a[i], lo, hi);
    detail::meter_flops("clamp", a.size());
    return c;
}

/// Row-wise softmax with max-shift; invariant to adding a constant per row.
inline Tensor softmax_rows(const Tensor& a) {
    Tensor c(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = a(i, 0);
        for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            c(i, j) = std::exp(a(i, j) - mx);
            s += c(i, j);
        }
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) /= s;
    }
    detail::meter_flops("softmax", 5ull * a.size());
    return c;
}

/// Row-wise standardization (mean 0, variance 1) with epsilon 1e-5 inside the
/// square root. Affine gain/bias live outside this kernel.
inline Tensor layernorm_rows(const Tensor& a, double eps = 1e-5) {
    Tensor c(a.rows(), a.cols());
    const double n = double(a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) mean += a(i, j);
        mean /= n;
        double var = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double d = a(i, j) - mean;
            var += d * d;
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = (a(i, j) - mean) * inv;
    }
    detail::meter_flops("layernorm", 8ull * a.size());
    return c;
}

/// Causal depthwise 1-D convolution over rows (time) per column (channel):
/// y[t,c] = sum_j k[j,c] * x[t-j,c], x zero-padded on the left.
inline Tensor dwconv1d(const Tensor& x, const Tensor& k) {
    if (k.cols() != x.cols()) throw ShapeMismatch("dwconv1d: channel counts differ");
    const std::size_t m = x.rows(), ch = x.cols(), taps = k.rows();
    Tensor y(m, ch);
    for (std::size_t t = 0; t < m; ++t)
        for (std::size_t j = 0; j < taps && j <= t; ++j)
            for (std::size_t c = 0; c < ch; ++c) y(t, c) += k(j, c) * x(t - j, c);
    detail::meter_flops("dwconv1d", 2ull * m * ch * taps);
    return y;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& idx) {
    Tensor c(idx.size(), a.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= a.rows()) throw ShapeMismatch("gather_rows: index out of range");
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(idx[i], j);
    }
    return c;
}

/// Gathers scattered elements (i, j) into a k x 1 column.
inline Tensor gather_elems(const Tensor& a,
                           const std::vector<std::pair<std::size_t, std::size_t>>& ij) {
    Tensor c(ij.size(), 1);
    for (std::size_t k = 0; k < ij.size(); ++k) {
        if (ij[k].first >= a.rows() || ij[k].second >= a.cols())
            throw ShapeMismatch("gather_elems: index out of range");
        c(k, 0) = a(ij[k].first, ij[k].second);
    }
    return c;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw ShapeMismatch("concat_rows: widths differ");
    Tensor c(a.rows() + b.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j);
    for (std::size_t i = 0; i < b.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) c(a.rows() + i, j) = b(i, j);
    return c;
}

/// Stacks equally wide blocks vertically in one pass.
inline Tensor concat_rows_n(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw EmptySet("concat_rows_n of nothing");
    std::size_t rows = 0;
    for (const Tensor& p : parts) {
        if (p.cols() != parts[0].cols()) throw ShapeMismatch("concat_rows_n: widths differ");
        rows += p.rows();
    }
    Tensor c(rows, parts[0].cols());
    std::size_t r = 0;
    for (const Tensor& p : parts)
        for (std::size_t i = 0; i < p.rows(); ++i, ++r)
            for (std::size_t j = 0; j < p.cols(); ++j) c(r, j) = p(i, j);
    return c;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) throw ShapeMismatch("concat_cols: heights differ");
    Tensor c(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) c(i, a.cols() + j) = b(i, j);
    }
    return c;
}

/// Rows [r0, r1).
inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
    if (r0 > r1 || r1 > a.rows()) throw ShapeMismatch("slice_rows: bad range");
    Tensor c(r1 - r0, a.cols());
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) c(i - r0, j) = a(i, j);
    return c;
}

inline Tensor sum_all(const Tensor& a) {
    Tensor c(1, 1);
    double s = 0.0;
    for (double v : a.data()) s += v;
    c(0, 0) = s;
    detail::meter_flops("sum", a.size());
    return c;
}

inline Tensor rowsum(const Tensor& a) {
    Tensor c(a.rows(), 1);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
        c(i, 0) = s;
    }
    detail::meter_flops("rowsum", a.size());
    return c;
}

inline Tensor colsum(const Tensor& a) {
    Tensor c(1, a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) c(0, j) += a(i, j);
    detail::meter_flops("colsum", a.size());
    return c;
}

inline double max_value(const Tensor& a) {
    if (a.empty()) throw EmptySet("max of an empty tensor");
    double m = a[0];
    for (double v : a.data()) m = std::max(m, v);
    return m;
}

/// Column-wise max over rows: (r,c) -> (1,c). Ties resolve to the lowest row,
/// which also fixes the subgradient routing in the Var overload.
inline Tensor colmax(const Tensor& a) {
    if (a.rows() == 0) throw EmptySet("colmax of an empty tensor");
    Tensor c(1, a.cols());
    for (std::size_t j = 0; j < a.cols(); ++j) {
        double m = a(0, j);
        for (std::size_t i = 1; i < a.rows(); ++i) m = std::max(m, a(i, j));
        c(0, j) = m;
    }
    detail::meter_flops("colmax", a.size());
    return c;
}

}  // namespace pcreg
