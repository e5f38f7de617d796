#include <doctest.h>

#include <cmath>
#include <vector>

#include "pcreg/attention.hpp"

using namespace pcreg;

namespace {

/// Independent reference: explicit loops, no shared kernels.
Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    const std::size_t m = q.rows(), n = k.rows(), d = q.cols(), dv = v.cols();
    Tensor out(m, dv);
    const double s = 1.0 / std::sqrt(double(d));
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<double> logits(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += q(i, c) * k(j, c);
            logits[j] = dot * s;
            mx = std::max(mx, logits[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(logits[j] - mx);
        for (std::size_t j = 0; j < n; ++j) {
            const double w = std::exp(logits[j] - mx) / z;
            for (std::size_t c = 0; c < dv; ++c) out(i, c) += w * v(j, c);
        }
    }
    return out;
}

std::vector<Tensor> pack_attention(const AttentionParams& p) {
    return {p.ln1_gain, p.ln1_bias, p.wq, p.wk, p.wv, p.wo,
            p.ln2_gain, p.ln2_bias, p.w1, p.b1, p.w2, p.b2};
}

AttentionParamsVar unpack_attention(const std::vector<Var>& v) {
    AttentionParamsVar p;
    p.ln1_gain = v[0];
    p.ln1_bias = v[1];
    p.wq = v[2];
    p.wk = v[3];
    p.wv = v[4];
    p.wo = v[5];
    p.ln2_gain = v[6];
    p.ln2_bias = v[7];
    p.w1 = v[8];
    p.b1 = v[9];
    p.w2 = v[10];
    p.b2 = v[11];
    return p;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

Tensor permute_rows(const Tensor& a, const std::vector<std::size_t>& perm) {
    Tensor out(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t c = 0; c < a.cols(); ++c) out(i, c) = a(perm[i], c);
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("attention");

TEST_CASE("scaled dot attention matches explicit-loop reference") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t m = 1 + rng.uniform_index(7);
        const std::size_t n = 1 + rng.uniform_index(7);
        const std::size_t d = 1 + rng.uniform_index(5);
        const std::size_t dv = 1 + rng.uniform_index(5);
        Tensor q = uniform_tensor(rng, m, d, 2.0);
        Tensor k = uniform_tensor(rng, n, d, 2.0);
        Tensor v = uniform_tensor(rng, n, dv, 2.0);
        CHECK(max_abs_diff(scaled_dot_attention(q, k, v), naive_attention(q, k, v)) <= 1e-12);
    }
}

TEST_CASE("attention rows are convex combinations of value rows") {
    Rng rng(12);
    Tensor q = uniform_tensor(rng, 6, 4, 3.0);
    Tensor k = uniform_tensor(rng, 5, 4, 3.0);
    Tensor v = uniform_tensor(rng, 5, 3, 1.0);
    Tensor out = scaled_dot_attention(q, k, v);
    for (std::size_t c = 0; c < v.cols(); ++c) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t j = 0; j < v.rows(); ++j) {
            lo = std::min(lo, v(j, c));
            hi = std::max(hi, v(j, c));
        }
        for (std::size_t i = 0; i < out.rows(); ++i) {
            CHECK(out(i, c) >= lo - 1e-12);
            CHECK(out(i, c) <= hi + 1e-12);
        }
    }
}

TEST_CASE("sharpened logits saturate to the best-matching value row") {
    // Q = 50 * I, K = I: row i puts logit 25 on key i and 0 elsewhere, so the
    // softmax collapses onto value row i up to ~3e-25.
    const std::size_t d = 4;
    Tensor q(d, d), k(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        q(i, i) = 50.0;
        k(i, i) = 1.0;
    }
    Rng rng(13);
    Tensor v = uniform_tensor(rng, d, 3, 5.0);
    Tensor sharp = scaled_dot_attention(q, k, v);
    CHECK(max_abs_diff(sharp, v) <= 1e-6);

    // Without sharpening the mix is far from one-hot.
    Tensor soft = scaled_dot_attention(k, k, v);  // logits 1/2 vs 0
    CHECK(max_abs_diff(soft, v) > 1e-3);
}

TEST_CASE("self-attention block is permutation-equivariant") {
    Rng rng(14);
    AttentionParams p = random_attention_params(rng, 6);
    Tensor f = uniform_tensor(rng, 9, 6, 1.5);
    std::vector<std::size_t> perm{4, 7, 0, 8, 2, 6, 1, 5, 3};
    Tensor direct = self_attention_block(p, permute_rows(f, perm));
    Tensor permuted = permute_rows(self_attention_block(p, f), perm);
    CHECK(max_abs_diff(direct, permuted) <= 1e-12);
}

TEST_CASE("cross-attention block is symmetric under input swap") {
    Rng rng(15);
    AttentionParams p = random_attention_params(rng, 5);
    Tensor fa = uniform_tensor(rng, 7, 5, 1.0);
    Tensor fb = uniform_tensor(rng, 4, 5, 1.0);
    auto [ya, yb] = cross_attention_block(p, fa, fb);
    auto [yb2, ya2] = cross_attention_block(p, fb, fa);
    CHECK(max_abs_diff(ya, ya2) == 0.0);
    CHECK(max_abs_diff(yb, yb2) == 0.0);
    CHECK(ya.rows() == fa.rows());
    CHECK(yb.rows() == fb.rows());
}

TEST_CASE("cross-attention mixes information across sides") {
    Rng rng(16);
    AttentionParams p = random_attention_params(rng, 5);
    Tensor fa = uniform_tensor(rng, 6, 5, 1.0);
    Tensor fb = uniform_tensor(rng, 6, 5, 1.0);
    Tensor fb_shifted = fb;
    fb_shifted(2, 1) += 0.8;  // a uniform shift would be erased by LayerNorm
    auto [ya, yb] = cross_attention_block(p, fa, fb);
    auto [ya2, yb2] = cross_attention_block(p, fa, fb_shifted);
    // Changing only the other side must change this side's output.
    CHECK(max_abs_diff(ya, ya2) > 1e-9);
    (void)yb;
    (void)yb2;
}

TEST_CASE("attention cost is quadratic with dominant term 4 M^2 d") {
    auto op_flops = [](std::size_t m, std::size_t d) {
        CostMeter meter;
        Rng rng(17);
        Tensor q = uniform_tensor(rng, m, d, 1.0);
        Tensor k = uniform_tensor(rng, m, d, 1.0);
        Tensor v = uniform_tensor(rng, m, d, 1.0);
        std::size_t flops = 0;
        std::size_t peak = 0;
        {
            CostScope scope(meter);
            Tensor out = scaled_dot_attention(q, k, v);
            flops = meter.total_flops;
            peak = meter.peak_bytes;
        }
        return std::pair<std::size_t, std::size_t>(flops, peak);
    };

    const std::size_t d = 64;
    auto [f256, p256] = op_flops(256, d);
    auto [f512, p512] = op_flops(512, d);
    const double dominant = 4.0 * 256.0 * 256.0 * double(d);
    CHECK(std::abs(double(f256) - dominant) / dominant <= 0.05);

    const double ratio = double(f512) / double(f256);
    CHECK(ratio >= 3.5);
    CHECK(ratio <= 4.5);

    // The M x M score matrix must be materialized: peak bytes grow quadratically.
    CHECK(p256 >= 256 * 256 * sizeof(double));
    CHECK(double(p512) / double(p256) >= 3.0);
}

TEST_CASE("shape and emptiness guards") {
    Tensor q(2, 3), k(2, 4), v(2, 3);
    CHECK_THROWS_AS(scaled_dot_attention(q, k, v), ShapeMismatch);
    Tensor k2(3, 3), v2(2, 3);
    CHECK_THROWS_AS(scaled_dot_attention(q, k2, v2), ShapeMismatch);
    Tensor empty(0, 3);
    CHECK_THROWS_AS(scaled_dot_attention(empty, empty, empty), EmptyFeatures);
}

TEST_CASE("gradients of the self-attention block check out") {
    Rng rng(18);
    AttentionParams p = random_attention_params(rng, 4);
    Tensor f = uniform_tensor(rng, 3, 4, 1.0);
    auto inputs = pack_attention(p);
    inputs.push_back(f);
    auto fn = [](const std::vector<Var>& v) {
        AttentionParamsVar ap = unpack_attention(v);
        Var out = self_attention_block(ap, v[12]);
        return sum_all(mul(out, out));
    };
    auto rep = gradcheck(fn, inputs, 1e-4, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("gradients of the cross-attention block check out") {
    Rng rng(19);
    AttentionParams p = random_attention_params(rng, 4);
    Tensor fa = uniform_tensor(rng, 3, 4, 1.0);
    Tensor fb = uniform_tensor(rng, 2, 4, 1.0);
    auto inputs = pack_attention(p);
    inputs.push_back(fa);
    inputs.push_back(fb);
    auto fn = [](const std::vector<Var>& v) {
        AttentionParamsVar ap = unpack_attention(v);
        auto [ya, yb] = cross_attention_block(ap, v[12], v[13]);
        return add(sum_all(mul(ya, ya)), sum_all(mul(yb, yb)));
    };
    auto rep = gradcheck(fn, inputs, 1e-4, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("blocks are deterministic across repeated evaluation") {
    Rng rng(20);
    AttentionParams p = random_attention_params(rng, 6);
    Tensor f = uniform_tensor(rng, 8, 6, 1.0);
    Tensor a = self_attention_block(p, f);
    Tensor b = self_attention_block(p, f);
    CHECK(max_abs_diff(a, b) == 0.0);
}

TEST_SUITE_END();
