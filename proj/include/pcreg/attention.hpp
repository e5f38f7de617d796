#pragma once

#include <cmath>
#include <utility>

#include "pcreg/autodiff.hpp"
#include "pcreg/rng.hpp"
#include "pcreg/ssm.hpp"
#include "pcreg/tensor.hpp"

namespace pcreg {

/// LayerNorm with learnable gain/bias (both 1 x C).
template <typename T>
T ln_affine(const T& x, const T& gain, const T& bias) {
    return add_rows(scale_cols(layernorm_rows(x), gain), bias);
}

/// softmax(Q K^T / sqrt(d_k)) V. No positional terms, so the map is
/// permutation-equivariant in the queries and permutation-invariant in the
/// key/value set.
template <typename T>
T scaled_dot_attention(const T& q, const T& k, const T& v) {
    if (cols_of(q) != cols_of(k) || rows_of(k) != rows_of(v))
        throw ShapeMismatch("attention: Q/K/V shapes inconsistent");
    if (rows_of(q) == 0 || rows_of(k) == 0) throw EmptyFeatures();
    const double s = 1.0 / std::sqrt(double(cols_of(k)));
    return matmul(softmax_rows(scale(matmul(q, transpose(k)), s)), v);
}

/// Pre-norm residual transformer block, single head:
///   h = F + Attn(LN(F)) W_o
///   y = h + W_2 SiLU(W_1 LN(h) + b_1) + b_2     (hidden width 2C)
template <typename T>
struct AttentionParamsT {
    T ln1_gain, ln1_bias;   // (1,C)
    T wq, wk, wv, wo;       // (C,C)
    T ln2_gain, ln2_bias;   // (1,C)
    T w1, b1;               // (2C,C), (1,2C)
    T w2, b2;               // (C,2C), (1,C)
};

using AttentionParams = AttentionParamsT<Tensor>;
using AttentionParamsVar = AttentionParamsT<Var>;

namespace detail {
template <typename T>
T attention_mlp(const AttentionParamsT<T>& p, const T& h) {
    T y = ln_affine(h, p.ln2_gain, p.ln2_bias);
    T hidden = silu(add_rows(matmul(y, transpose(p.w1)), p.b1));
    return add(h, add_rows(matmul(hidden, transpose(p.w2)), p.b2));
}
}  // namespace detail

template <typename T>
T self_attention_block(const AttentionParamsT<T>& p, const T& f) {
    T x = ln_affine(f, p.ln1_gain, p.ln1_bias);
    T q = matmul(x, transpose(p.wq));
    T k = matmul(x, transpose(p.wk));
    T v = matmul(x, transpose(p.wv));
    T h = add(f, matmul(scaled_dot_attention(q, k, v), transpose(p.wo)));
    return detail::attention_mlp(p, h);
}

/// Symmetric cross-attention: each side queries the other with shared
/// weights, so swapping the inputs swaps the outputs exactly.
template <typename T>
std::pair<T, T> cross_attention_block(const AttentionParamsT<T>& p, const T& fa, const T& fb) {
    T xa = ln_affine(fa, p.ln1_gain, p.ln1_bias);
    T xb = ln_affine(fb, p.ln1_gain, p.ln1_bias);
    T qa = matmul(xa, transpose(p.wq));
    T ka = matmul(xa, transpose(p.wk));
    T va = matmul(xa, transpose(p.wv));
    T qb = matmul(xb, transpose(p.wq));
    T kb = matmul(xb, transpose(p.wk));
    T vb = matmul(xb, transpose(p.wv));
    T ha = add(fa, matmul(scaled_dot_attention(qa, kb, vb), transpose(p.wo)));
    T hb = add(fb, matmul(scaled_dot_attention(qb, ka, va), transpose(p.wo)));
    return {detail::attention_mlp(p, ha), detail::attention_mlp(p, hb)};
}

inline AttentionParams random_attention_params(Rng& rng, std::size_t width) {
    const double s = 1.0 / std::sqrt(double(width));
    AttentionParams p;
    p.ln1_gain = Tensor::full(1, width, 1.0);
    p.ln1_bias = Tensor(1, width);
    p.wq = uniform_tensor(rng, width, width, s);
    p.wk = uniform_tensor(rng, width, width, s);
    p.wv = uniform_tensor(rng, width, width, s);
    p.wo = uniform_tensor(rng, width, width, s);
    p.ln2_gain = Tensor::full(1, width, 1.0);
    p.ln2_bias = Tensor(1, width);
    p.w1 = uniform_tensor(rng, 2 * width, width, s);
    p.b1 = Tensor(1, 2 * width);
    p.w2 = uniform_tensor(rng, width, 2 * width, 1.0 / std::sqrt(2.0 * double(width)));
    p.b2 = Tensor(1, width);
    return p;
}

}  // namespace pcreg
