#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pcreg/errors.hpp"
#include "pcreg/tensor.hpp"

namespace pcreg {

// ============================================================================
// Reverse-mode autodiff
// ============================================================================
//
// A Var wraps a node in a dynamically recorded graph. Every overloaded op
// computes its value through the plain Tensor kernel, so a computation run on
// Vars and one run on raw Tensors are numerically identical; the Var layer
// only adds the backward rules. backward() walks the recorded nodes in
// reverse creation order and accumulates gradients into the leaves.

struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;
    std::uint64_t id = 0;
    bool requires_grad = false;

    Tensor& grad_buf() {
        if (grad.empty()) grad = Tensor(value.rows(), value.cols());
        return grad;
    }
};

namespace detail {
inline std::uint64_t next_node_id() {
    thread_local std::uint64_t counter = 0;
    return ++counter;
}
}  // namespace detail

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node(std::move(n)) {}

    const Tensor& value() const { return node->value; }
    const Tensor& grad() const { return node->grad; }
    bool requires_grad() const { return node && node->requires_grad; }
    bool defined() const { return node != nullptr; }

    std::shared_ptr<Node> node;
};

/// Leaf that gradients flow into.
inline Var make_param(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = detail::next_node_id();
    n->requires_grad = true;
    return Var(std::move(n));
}

/// Leaf treated as a constant.
inline Var make_constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = detail::next_node_id();
    return Var(std::move(n));
}

/// Interior node; backprop reads self.grad and accumulates into the parents.
/// Public so tests can install deliberately broken rules as a negative
/// control for gradcheck.
inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = detail::next_node_id();
    for (const Var& p : parents) {
        n->parents.push_back(p.node);
        n->requires_grad = n->requires_grad || p.node->requires_grad;
    }
    if (n->requires_grad) n->backprop = std::move(backprop);
    return Var(std::move(n));
}

namespace detail {
inline void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}
}  // namespace detail

/// Runs reverse-mode accumulation from a scalar output. Grad buffers of all
/// reachable nodes are reset first, so repeated calls do not compound.
inline void backward(const Var& out) {
    if (!out.defined() || !out.value().is_scalar()) throw NonScalarOutput();
    if (!out.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{out.node.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        if (!n->requires_grad || !seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });

    for (Node* n : order) {
        Tensor& g = n->grad_buf();
        std::fill(g.data().begin(), g.data().end(), 0.0);
    }
    out.node->grad_buf()(0, 0) = 1.0;
    for (Node* n : order)
        if (n->backprop) n->backprop(*n);
}

// ============================================================================
// Op overloads (each mirrors a Tensor kernel)
// ============================================================================

inline Var matmul(const Var& a, const Var& b) {
    return make_op(matmul(a.value(), b.value()), {a, b}, [pa = a.node, pb = b.node](Node& self) {
        if (pa->requires_grad)
            detail::accumulate(pa->grad_buf(), matmul(self.grad, transpose(pb->value)));
        if (pb->requires_grad)
            detail::accumulate(pb->grad_buf(), matmul(transpose(pa->value), self.grad));
    });
}

inline Var transpose(const Var& a) {
    return make_op(transpose(a.value()), {a}, [pa = a.node](Node& self) {
        detail::accumulate(pa->grad_buf(), transpose(self.grad));
    });
}

inline Var add(const Var& a, const Var& b) {
    return make_op(add(a.value(), b.value()), {a, b}, [pa = a.node, pb = b.node](Node& self) {
        if (pa->requires_grad) detail::accumulate(pa->grad_buf(), self.grad);
        if (pb->requires_grad) detail::accumulate(pb->grad_buf(), self.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    return make_op(sub(a.value(), b.value()), {a, b}, [pa = a.node, pb = b.node](Node& self) {
        if (pa->requires_grad) detail::accumulate(pa->grad_buf(), self.grad);
        if (pb->requires_grad) detail::accumulate(pb->grad_buf(), scale(self.grad, -1.0));
    });
}

inline Var mul(const Var& a, const Var& b) {
    return make_op(mul(a.value(), b.value()), {a, b}, [pa = a.node, pb = b.node](Node& self) {
        if (pa->requires_grad) detail::accumulate(pa->grad_buf(), mul(self.grad, pb->value));
        if (pb->requires_grad) detail::accumulate(pb->grad_buf(), mul(self.grad, pa->value));
    });
}

inline Var div(const Var& a, const Var& b) {
    return make_op(div(a.value(), b.value()), {a, b}, [pa = a.node, pb = b.node](Node& self) {
        if (pa->requires_grad) detail::accumulate(pa->grad_buf(), div(self.grad, pb->value));
        if (pb->requires_grad) {
            Tensor g = div(mul(self.grad, pa->value), mul(pb->value, pb->value));
            detail::accumulate(pb->grad_buf(), scale(g, -1.0));
        }
    });
}

inline Var scale(const Var& a, double s) {
    return make_op(scale(a.value(), s), {a}, [pa = a.node, s](Node& self) {
        detail::accumulate(pa->grad_buf(), scale(self.grad, s));
    });
}

inline Var add_scalar(const Var& a, double s) {
    return make_op(add_scalar(a.value(), s), {a}, [pa = a.node](Node& self) {
        detail::accumulate(pa->grad_buf(), self.grad);
    });
}

inline Var add_rows(const Var& a, const Var& v) {
    return make_op(add_rows(a.value(), v.value()), {a, v}, [pa = a.node, pv = v.node](Node& self) {
        if (pa->requires_grad) detail::accumulate(pa->grad_buf(), self.grad);
        if (pv->requires_grad) detail::accumulate(pv->grad_buf(), colsum(self.grad));
    });
}

inline Var scale_rows(const Var& a, const Var& v) {
    return make_op(scale_rows(a.value(), v.value()), {a, v},
                   [pa = a.node, pv = v.node](Node& self) {
                       if (pa->requires_grad)
                           detail::accumulate(pa->grad_buf(), scale_rows(self.grad, pv->value));
                       if (pv->requires_grad)
                           detail::accumulate(pv->grad_buf(), rowsum(mul(self.grad, pa->value)));
                   });
}

inline Var scale_cols(const Var& a, const Var& v) {
    return make_op(scale_cols(a.value(), v.value()), {a, v},
                   [pa = a.node, pv = v.node](Node& self) {
                       if (pa->requires_grad)
                           detail::accumulate(pa->grad_buf(), scale_cols(self.grad, pv->value));
                       if (pv->requires_grad)
                           detail::accumulate(pv->grad_buf(), colsum(mul(self.grad, pa->value)));
                   });
}

inline Var exp(const Var& a) {
    return make_op(exp(a.value()), {a}, [pa = a.node](Node& self) {
        detail::accumulate(pa->grad_buf(), mul(self.grad, self.value));
    });
}

inline Var log(const Var& a) {
    return make_op(log(a.value()), {a}, [pa = a.node](Node& self) {
        detail::accumulate(pa->grad_buf(), div(self.grad, pa->value));
    });
}

inline Var sqrt(const Var& a) {
    return make_op(sqrt(a.value()), {a}, [pa = a.node](Node& self) {
        Tensor g(self.value.rows(), self.value.cols());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * 0.5 / self.value[i];
        detail::accumulate(pa->grad_buf(), g);
    });
}

inline Var sigmoid(const Var& a) {
    return make_op(sigmoid(a.value()), {a}, [pa = a.node](Node& self) {
        Tensor g(self.value.rows(), self.value.cols());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = self.value[i];
            g[i] = self.grad[i] * s * (1.0 - s);
        }
        detail::accumulate(pa->grad_buf(), g);
    });
}

inline Var silu(const Var& a) {
    return make_op(silu(a.value()), {a}, [pa = a.node](Node& self) {
        Tensor g(self.value.rows(), self.value.cols());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = pa->value[i];
            const double s = sigmoid_scalar(x);
            g[i] = self.grad[i] * s * (1.0 + x * (1.0 - s));
        }
        detail::accumulate(pa->grad_buf(), g);
    });
}

inline Var softplus(const Var& a) {
    return make_op(softplus(a.value()), {a}, [pa = a.node](Node& self) {
        Tensor g(self.value.rows(), self.value.cols());
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = self.grad[i] * sigmoid_scalar(pa->value[i]);
        detail::accumulate(pa->grad_buf(), g);
    });
}

inline Var zoh_phi(const Var& a) {
    return make_op(zoh_phi(a.value()), {a}, [pa = a.node](Node& self) {
        Tensor g(self.value.rows(), self.value.cols());
        for (std::size_t i = 0; i < g.size(); ++i)
            g[i] = self.grad[i] * zoh_phi_grad_scalar(pa->value[i]);
        detail::accumulate(pa->grad_buf(), g);
    });
}

/// Zero gradient outside the open interval (lo, hi).
inline Var clamp(const Var& a, double lo, double hi) {
    return make_op(clamp(a.value(), lo, hi), {a}, [pa = a.node, lo, hi](Node& self) {
        Tensor g(self.value.rows(), self.value.cols());
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = pa->value[i];
            g[i] = (x > lo && x < hi) ? self.grad[i] : 0.0;
        }
        detail::accumulate(pa->grad_buf(), g);
    });
}

inline Var softmax_rows(const Var& a) {
    return make_op(softmax_rows(a.value()), {a}, [pa = a.node](Node& self) {
        const Tensor& p = self.value;
        Tensor g(p.rows(), p.cols());
        for (std::size_t i = 0; i < p.rows(); ++i) {
            double dotv = 0.0;
            for (std::size_t j = 0; j < p.cols(); ++j) dotv += self.grad(i, j) * p(i, j);
            for (std::size_t j = 0; j < p.cols(); ++j)
                g(i, j) = p(i, j) * (self.grad(i, j) - dotv);
        }
        detail::accumulate(pa->grad_buf(), g);
    });
}

inline Var layernorm_rows(const Var& a, double eps = 1e-5) {
    return make_op(layernorm_rows(a.value(), eps), {a}, [pa = a.node, eps](Node& self) {
        const Tensor& x = pa->value;
        const Tensor& y = self.value;
        const double n = double(x.cols());
        Tensor g(x.rows(), x.cols());
        for (std::size_t i = 0; i < x.rows(); ++i) {
            double mean = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) mean += x(i, j);
            mean /= n;
            double var = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) {
                const double d = x(i, j) - mean;
                var += d * d;
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            double gsum = 0.0, gysum = 0.0;
            for (std::size_t j = 0; j < x.cols(); ++j) {
                gsum += self.grad(i, j);
                gysum += self.grad(i, j) * y(i, j);
            }
            for (std::size_t j = 0; j < x.cols(); ++j)
                g(i, j) = inv * (self.grad(i, j) - gsum / n - y(i, j) * gysum / n);
        }
        detail::accumulate(pa->grad_buf(), g);
    });
}

inline Var dwconv1d(const Var& x, const Var& k) {
    return make_op(dwconv1d(x.value(), k.value()), {x, k},
                   [px = x.node, pk = k.node](Node& self) {
                       const Tensor& xv = px->value;
                       const Tensor& kv = pk->value;
                       const std::size_t m = xv.rows(), ch = xv.cols(), taps = kv.rows();
                       if (px->requires_grad) {
                           Tensor gx(m, ch);
                           for (std::size_t s = 0; s < m; ++s)
                               for (std::size_t j = 0; j < taps && s + j < m; ++j)
                                   for (std::size_t c = 0; c < ch; ++c)
                                       gx(s, c) += kv(j, c) * self.grad(s + j, c);
                           detail::accumulate(px->grad_buf(), gx);
                       }
                       if (pk->requires_grad) {
                           Tensor gk(taps, ch);
                           for (std::size_t t = 0; t < m; ++t)
                               for (std::size_t j = 0; j < taps && j <= t; ++j)
                                   for (std::size_t c = 0; c < ch; ++c)
                                       gk(j, c) += self.grad(t, c) * xv(t - j, c);
                           detail::accumulate(pk->grad_buf(), gk);
                       }
                   });
}

inline Var gather_rows(const Var& a, std::vector<std::size_t> idx) {
    return make_op(gather_rows(a.value(), idx), {a}, [pa = a.node, idx](Node& self) {
        Tensor& g = pa->grad_buf();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) g(idx[i], j) += self.grad(i, j);
    });
}

inline Var gather_elems(const Var& a, std::vector<std::pair<std::size_t, std::size_t>> ij) {
    return make_op(gather_elems(a.value(), ij), {a}, [pa = a.node, ij](Node& self) {
        Tensor& g = pa->grad_buf();
        for (std::size_t k = 0; k < ij.size(); ++k)
            g(ij[k].first, ij[k].second) += self.grad(k, 0);
    });
}

inline Var concat_rows(const Var& a, const Var& b) {
    return make_op(concat_rows(a.value(), b.value()), {a, b},
                   [pa = a.node, pb = b.node](Node& self) {
                       const std::size_t ra = pa->value.rows();
                       if (pa->requires_grad)
                           detail::accumulate(pa->grad_buf(), slice_rows(self.grad, 0, ra));
                       if (pb->requires_grad)
                           detail::accumulate(pb->grad_buf(),
                                              slice_rows(self.grad, ra, self.value.rows()));
                   });
}

inline Var concat_rows_n(const std::vector<Var>& parts) {
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (const Var& p : parts) values.push_back(p.value());
    return make_op(concat_rows_n(values), parts, [parts](Node& self) {
        std::size_t r = 0;
        for (const Var& p : parts) {
            const std::size_t h = p.node->value.rows();
            if (p.node->requires_grad)
                detail::accumulate(p.node->grad_buf(), slice_rows(self.grad, r, r + h));
            r += h;
        }
    });
}

inline Var concat_cols(const Var& a, const Var& b) {
    return make_op(concat_cols(a.value(), b.value()), {a, b},
                   [pa = a.node, pb = b.node](Node& self) {
                       const std::size_t ca = pa->value.cols();
                       if (pa->requires_grad) {
                           Tensor& g = pa->grad_buf();
                           for (std::size_t i = 0; i < g.rows(); ++i)
                               for (std::size_t j = 0; j < ca; ++j) g(i, j) += self.grad(i, j);
                       }
                       if (pb->requires_grad) {
                           Tensor& g = pb->grad_buf();
                           for (std::size_t i = 0; i < g.rows(); ++i)
                               for (std::size_t j = 0; j < g.cols(); ++j)
                                   g(i, j) += self.grad(i, ca + j);
                       }
                   });
}

inline Var slice_rows(const Var& a, std::size_t r0, std::size_t r1) {
    return make_op(slice_rows(a.value(), r0, r1), {a}, [pa = a.node, r0](Node& self) {
        Tensor& g = pa->grad_buf();
        for (std::size_t i = 0; i < self.grad.rows(); ++i)
            for (std::size_t j = 0; j < self.grad.cols(); ++j)
                g(r0 + i, j) += self.grad(i, j);
    });
}

inline Var sum_all(const Var& a) {
    return make_op(sum_all(a.value()), {a}, [pa = a.node](Node& self) {
        const double g = self.grad(0, 0);
        Tensor& dst = pa->grad_buf();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g;
    });
}

inline Var rowsum(const Var& a) {
    return make_op(rowsum(a.value()), {a}, [pa = a.node](Node& self) {
        Tensor& dst = pa->grad_buf();
        for (std::size_t i = 0; i < dst.rows(); ++i)
            for (std::size_t j = 0; j < dst.cols(); ++j) dst(i, j) += self.grad(i, 0);
    });
}

inline Var colsum(const Var& a) {
    return make_op(colsum(a.value()), {a}, [pa = a.node](Node& self) {
        Tensor& dst = pa->grad_buf();
        for (std::size_t i = 0; i < dst.rows(); ++i)
            for (std::size_t j = 0; j < dst.cols(); ++j) dst(i, j) += self.grad(0, j);
    });
}

inline Var colmax(const Var& a) {
    Tensor out = colmax(a.value());
    std::vector<std::size_t> arg(out.cols());
    for (std::size_t j = 0; j < out.cols(); ++j) {
        for (std::size_t i = 0; i < a.value().rows(); ++i) {
            if (a.value()(i, j) == out(0, j)) {
                arg[j] = i;
                break;
            }
        }
    }
    return make_op(std::move(out), {a}, [pa = a.node, arg = std::move(arg)](Node& self) {
        Tensor& dst = pa->grad_buf();
        for (std::size_t j = 0; j < dst.cols(); ++j) dst(arg[j], j) += self.grad(0, j);
    });
}

// ============================================================================
// Generic accessors so numeric code can be written once and instantiated for
// both Tensor (plain forward) and Var (recorded for backward)
// ============================================================================

inline std::size_t rows_of(const Tensor& t) { return t.rows(); }
inline std::size_t cols_of(const Tensor& t) { return t.cols(); }
inline std::size_t rows_of(const Var& v) { return v.value().rows(); }
inline std::size_t cols_of(const Var& v) { return v.value().cols(); }
inline const Tensor& value_of(const Tensor& t) { return t; }
inline const Tensor& value_of(const Var& v) { return v.value(); }

template <typename T>
T make_zeros(std::size_t r, std::size_t c);
template <>
inline Tensor make_zeros<Tensor>(std::size_t r, std::size_t c) {
    return Tensor(r, c);
}
template <>
inline Var make_zeros<Var>(std::size_t r, std::size_t c) {
    return make_constant(Tensor(r, c));
}

template <typename T>
T lift(Tensor t);
template <>
inline Tensor lift<Tensor>(Tensor t) {
    return t;
}
template <>
inline Var lift<Var>(Tensor t) {
    return make_constant(std::move(t));
}

// ============================================================================
// Finite-difference gradient checking
// ============================================================================

struct GradCheckReport {
    bool pass = true;
    double max_rel_err = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_element = 0;
};

/// Compares reverse-mode gradients of a scalar-valued function against
/// central finite differences. Relative error uses max(1, |a|, |b|) in the
/// denominator so near-zero gradients compare absolutely.
inline GradCheckReport gradcheck(const std::function<Var(const std::vector<Var>&)>& f,
                                 const std::vector<Tensor>& inputs, double step = 1e-4,
                                 double tol = 1e-4) {
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const Tensor& t : inputs) leaves.push_back(make_param(t));
    Var out = f(leaves);
    if (!out.value().is_scalar()) throw NonScalarOutput();
    backward(out);

    std::vector<Tensor> analytic;
    analytic.reserve(leaves.size());
    for (Var& v : leaves)
        analytic.push_back(v.grad().empty() ? Tensor(v.value().rows(), v.value().cols())
                                            : v.grad());

    auto eval = [&](const std::vector<Tensor>& xs) {
        std::vector<Var> vs;
        vs.reserve(xs.size());
        for (const Tensor& t : xs) vs.push_back(make_constant(t));
        return f(vs).value().scalar();
    };

    GradCheckReport rep;
    std::vector<Tensor> work = inputs;
    for (std::size_t t = 0; t < work.size(); ++t) {
        for (std::size_t e = 0; e < work[t].size(); ++e) {
            const double saved = work[t][e];
            work[t][e] = saved + step;
            const double fp = eval(work);
            work[t][e] = saved - step;
            const double fm = eval(work);
            work[t][e] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double ad = analytic[t][e];
            double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
            // A NaN derivative must fail the check, not slip past the max.
            if (!std::isfinite(rel)) rel = std::numeric_limits<double>::infinity();
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = t;
                rep.worst_element = e;
            }
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace pcreg
