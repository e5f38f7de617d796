#pragma once

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "pcreg/autodiff.hpp"
#include "pcreg/geom.hpp"
#include "pcreg/tensor.hpp"

namespace pcreg {

// All logs and divisions are epsilon-guarded at 1e-12; similarities feeding
// exponentials are capped at +/-50.
inline constexpr double kLossEps = 1e-12;
inline constexpr double kSimilarityCap = 50.0;

using IndexPairs = std::vector<std::pair<std::size_t, std::size_t>>;

namespace detail {

/// Row-wise Euclidean norms with a tiny floor so the sqrt stays differentiable
/// at coincident points.
template <typename T>
T row_norms(const T& diff) {
    return sqrt(add_scalar(rowsum(mul(diff, diff)), kLossEps * kLossEps));
}

/// Nearest row of `to` for every row of `from` (by value), ties to lowest index.
inline std::vector<std::size_t> nearest_rows(const Tensor& from, const Tensor& to) {
    std::vector<std::size_t> out(from.rows());
    for (std::size_t i = 0; i < from.rows(); ++i) {
        double best = 1e300;
        std::size_t arg = 0;
        for (std::size_t j = 0; j < to.rows(); ++j) {
            double d2 = 0.0;
            for (std::size_t c = 0; c < from.cols(); ++c) {
                const double d = from(i, c) - to(j, c);
                d2 += d * d;
            }
            if (d2 < best) {
                best = d2;
                arg = j;
            }
        }
        out[i] = arg;
    }
    return out;
}

}  // namespace detail

// ============================================================================
// Keypoint detection loss: symmetric uncertainty-weighted nearest-neighbor
// alignment, log sigma + distance / sigma per matched pair
// ============================================================================

template <typename T>
T loss_keypoint(const T& x_pos, const T& x_sigma, const T& y_pos, const T& y_sigma) {
    if (rows_of(x_pos) == 0 || rows_of(y_pos) == 0) throw EmptySet("keypoint loss on empty set");

    auto directed = [](const T& a_pos, const T& a_sig, const T& b_pos, const T& b_sig) {
        const auto nn = detail::nearest_rows(value_of(a_pos), value_of(b_pos));
        T matched_pos = gather_rows(b_pos, nn);
        T matched_sig = gather_rows(b_sig, nn);
        T sigma_bar = scale(add(a_sig, matched_sig), 0.5);
        T dist = detail::row_norms(sub(a_pos, matched_pos));
        T term = add(log(add_scalar(sigma_bar, kLossEps)), div(dist, add_scalar(sigma_bar, kLossEps)));
        return scale(sum_all(term), 1.0 / double(rows_of(a_pos)));
    };
    return add(directed(x_pos, x_sigma, y_pos, y_sigma), directed(y_pos, y_sigma, x_pos, x_sigma));
}

// ============================================================================
// Coarse-matching losses: overlap-weighted cross entropy on the match matrix
// ============================================================================

namespace detail {

template <typename T>
T weighted_log_prob(const T& p, const Tensor& overlap, const IndexPairs& gt_pairs,
                    double o_sum) {
    T p_sel = gather_elems(p, gt_pairs);
    Tensor o_sel(gt_pairs.size(), 1);
    for (std::size_t k = 0; k < gt_pairs.size(); ++k)
        o_sel(k, 0) = overlap(gt_pairs[k].first, gt_pairs[k].second);
    T weighted = mul(lift<T>(std::move(o_sel)), log(add_scalar(p_sel, kLossEps)));
    return scale(sum_all(weighted), -1.0 / o_sum);
}

inline double overlap_sum(const Tensor& overlap, const IndexPairs& gt_pairs) {
    double o_sum = 0.0;
    for (const auto& [i, j] : gt_pairs) o_sum += overlap(i, j);
    return o_sum;
}

}  // namespace detail

/// Layer-averaged spot-matching loss over the per-layer match matrices.
template <typename T>
T loss_spot(const std::vector<T>& p_layers, const Tensor& overlap, const IndexPairs& gt_pairs) {
    if (p_layers.empty()) throw EmptySet("spot loss needs at least one layer");
    const double o_sum = detail::overlap_sum(overlap, gt_pairs);
    if (gt_pairs.empty() || o_sum <= 0.0) throw NoGroundTruthPairs();
    T acc = detail::weighted_log_prob(p_layers[0], overlap, gt_pairs, o_sum);
    for (std::size_t l = 1; l < p_layers.size(); ++l)
        acc = add(acc, detail::weighted_log_prob(p_layers[l], overlap, gt_pairs, o_sum));
    return scale(acc, 1.0 / double(p_layers.size()));
}

/// Final coarse loss: the positive spot term on the final matrix plus
/// background terms pushing predicted overlap toward zero on nodes without
/// correspondences. Empty background sets contribute nothing.
template <typename T>
T loss_coarse(const T& p_final, const Tensor& overlap, const IndexPairs& gt_pairs,
              const std::vector<std::size_t>& bg_src, const std::vector<std::size_t>& bg_tgt,
              const T& o_hat_src, const T& o_hat_tgt) {
    const double o_sum = detail::overlap_sum(overlap, gt_pairs);
    if (gt_pairs.empty() || o_sum <= 0.0) throw NoGroundTruthPairs();
    T acc = detail::weighted_log_prob(p_final, overlap, gt_pairs, o_sum);

    auto background = [](const T& o_hat, const std::vector<std::size_t>& idx) {
        T sel = gather_rows(o_hat, idx);
        T one_minus = add_scalar(scale(sel, -1.0), 1.0);
        return scale(sum_all(log(add_scalar(one_minus, kLossEps))), -1.0 / double(idx.size()));
    };
    if (!bg_src.empty()) acc = add(acc, background(o_hat_src, bg_src));
    if (!bg_tgt.empty()) acc = add(acc, background(o_hat_tgt, bg_tgt));
    return acc;
}

// ============================================================================
// InfoNCE descriptor loss with a symmetric bilinear similarity
// ============================================================================

/// anchors/positives are row-aligned (A,W); negatives (M,W) are shared across
/// anchors. The bilinear form uses the symmetrized (V + V^T)/2. Similarities
/// are clamped to +/-50 before exponentiation, so hopeless negatives change
/// nothing (< 1e-12).
template <typename T>
T loss_infonce(const T& anchors, const T& positives, const T& negatives, const T& w_raw) {
    const std::size_t a = rows_of(anchors);
    if (a == 0) throw EmptySet("infonce loss without anchors");
    if (rows_of(positives) != a) throw ShapeMismatch("infonce: one positive per anchor");
    T w_sym = scale(add(w_raw, transpose(w_raw)), 0.5);
    T proj = matmul(anchors, w_sym);  // (A,W)
    T s_pos = clamp(rowsum(mul(proj, positives)), -kSimilarityCap, kSimilarityCap);  // (A,1)
    if (rows_of(negatives) == 0) return scale(sum_all(s_pos), 0.0);
    T s_neg = clamp(matmul(proj, transpose(negatives)), -kSimilarityCap, kSimilarityCap);
    // exp is safe after the cap; log-sum-exp over [positive | negatives].
    T z = log(rowsum(exp(concat_cols(s_pos, s_neg))));
    return scale(sum_all(sub(z, s_pos)), 1.0 / double(a));
}

// ============================================================================
// Keypoint correspondence loss: mean distance to GT-transformed sources
// ============================================================================

/// Applies a rigid transform to (n,3) row vectors; the transform is constant,
/// gradients flow through the rows.
template <typename T>
T transform_rows(const T& x, const RigidTransform& t) {
    if (cols_of(x) != 3) throw ShapeMismatch("transform_rows expects (n,3)");
    Tensor rot_t(3, 3);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rot_t(r, c) = t.rotation[c * 3 + r];  // R^T for row vectors
    Tensor trans(1, 3);
    for (int c = 0; c < 3; ++c) trans(0, c) = t.translation[c];
    return add_rows(matmul(x, lift<T>(std::move(rot_t))), lift<T>(std::move(trans)));
}

template <typename T>
T loss_keycorr(const T& x, const T& y_hat, const RigidTransform& gt) {
    const std::size_t n = rows_of(x);
    if (n == 0 || rows_of(y_hat) != n) throw EmptySet("correspondence loss needs matched rows");
    T dist = detail::row_norms(sub(transform_rows(x, gt), y_hat));
    return scale(sum_all(dist), 1.0 / double(n));
}

// ============================================================================
// Inlier classification loss: binary cross-entropy
// ============================================================================

template <typename T>
T loss_inlier(const T& scores, const Tensor& labels) {
    const std::size_t n = rows_of(scores);
    if (n == 0) throw EmptySet("inlier loss without scores");
    if (labels.rows() != n || labels.cols() != 1) throw ShapeMismatch("inlier labels shape");
    for (double v : labels.data())
        if (v != 0.0 && v != 1.0) throw ShapeMismatch("inlier labels must be 0/1");
    T pos = mul(lift<T>(labels), log(add_scalar(scores, kLossEps)));
    Tensor flipped(labels.rows(), 1);
    for (std::size_t i = 0; i < labels.rows(); ++i) flipped(i, 0) = 1.0 - labels(i, 0);
    T one_minus = add_scalar(scale(scores, -1.0), 1.0);
    T neg = mul(lift<T>(std::move(flipped)), log(add_scalar(one_minus, kLossEps)));
    return scale(sum_all(add(pos, neg)), -1.0 / double(n));
}

// ============================================================================
// Pose losses: translation L2 and rotation chordal (Frobenius) distance
// ============================================================================

template <typename T>
std::pair<T, T> loss_pose(const T& r_hat, const T& t_hat, const RigidTransform& gt) {
    if (rows_of(r_hat) != 3 || cols_of(r_hat) != 3 || rows_of(t_hat) != 1 || cols_of(t_hat) != 3)
        throw ShapeMismatch("pose loss expects a 3x3 rotation and 1x3 translation");
    Tensor r_gt(3, 3), t_gt(1, 3);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) r_gt(r, c) = gt.rotation[r * 3 + c];
    for (int c = 0; c < 3; ++c) t_gt(0, c) = gt.translation[c];

    T loss_t = detail::row_norms(sub(t_hat, lift<T>(std::move(t_gt))));

    T rel = matmul(transpose(r_hat), lift<T>(std::move(r_gt)));
    Tensor eye(3, 3);
    for (int d = 0; d < 3; ++d) eye(d, d) = 1.0;
    T defect = sub(rel, lift<T>(std::move(eye)));
    T loss_r = sqrt(add_scalar(sum_all(mul(defect, defect)), kLossEps * kLossEps));
    return {loss_r, loss_t};
}

// ============================================================================
// Weighted total
// ============================================================================

struct LossWeights {
    double lambda_s = 0.1;
    double lambda_c = 0.2;
    double lambda_f = 1.0;
    double lambda_k = 1.0;
    double lambda_i = 1.0;
    double lambda_t = 5.0;
    double lambda_r = 20.0;

    /// Outdoor-scan defaults (the constructor values).
    static LossWeights outdoor() { return {}; }
    /// Indoor-scan overrides: heavier coarse and correspondence terms.
    static LossWeights indoor() {
        LossWeights w;
        w.lambda_c = 1.0;
        w.lambda_k = 10.0;
        return w;
    }
};

template <typename T>
struct LossTermsT {
    T keypoint, spot, coarse, infonce, keycorr, inlier, pose_t, pose_r;
};

using LossTerms = LossTermsT<Tensor>;
using LossTermsVar = LossTermsT<Var>;

template <typename T>
T loss_total(const LossTermsT<T>& terms, const LossWeights& w) {
    for (double lambda : {w.lambda_s, w.lambda_c, w.lambda_f, w.lambda_k, w.lambda_i, w.lambda_t,
                          w.lambda_r})
        if (lambda < 0.0) throw DomainError("loss weights must be non-negative");
    T acc = terms.keypoint;
    acc = add(acc, scale(terms.spot, w.lambda_s));
    acc = add(acc, scale(terms.coarse, w.lambda_c));
    acc = add(acc, scale(terms.infonce, w.lambda_f));
    acc = add(acc, scale(terms.keycorr, w.lambda_k));
    acc = add(acc, scale(terms.inlier, w.lambda_i));
    acc = add(acc, scale(terms.pose_t, w.lambda_t));
    acc = add(acc, scale(terms.pose_r, w.lambda_r));
    return acc;
}

}  // namespace pcreg
