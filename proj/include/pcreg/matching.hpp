#pragma once

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "pcreg/autodiff.hpp"
#include "pcreg/backbone.hpp"
#include "pcreg/estimator.hpp"
#include "pcreg/geom.hpp"
#include "pcreg/tensor.hpp"

namespace pcreg {

// ============================================================================
// Hierarchy level conventions: level 1 carries the fine (densest downsampled)
// nodes, level depth-2 the semi-dense keypoint anchors, the last level the
// coarse anchors used for superpoint matching.
// ============================================================================

inline std::size_t fine_level_index(const Hierarchy& h) {
    if (h.depth() < 2) throw ShapeMismatch("hierarchy has no downsampled level");
    return 1;
}

inline std::size_t semi_dense_level_index(const Hierarchy& h) {
    if (h.depth() < 3) throw ShapeMismatch("hierarchy too shallow for a semi-dense level");
    return h.depth() - 2;
}

// ============================================================================
// Coarse matching: dual softmax over cosine similarities
// ============================================================================

struct MatchMatrix {
    Tensor scores;              // final confidence matrix
    std::vector<Tensor> layers; // per-encoder-layer matrices, same construction
};

template <typename T>
T normalize_rows(const T& x) {
    T norms = sqrt(rowsum(mul(x, x)));
    T recip = div(lift<T>(Tensor::full(rows_of(x), 1, 1.0)), add_scalar(norms, 1e-12));
    return scale_rows(x, recip);
}

/// m_ij = softmax_row(S/tau)_ij * softmax_col(S/tau)_ij over the cosine
/// similarity S. Every entry lands in [0,1]; swapping the inputs transposes
/// the matrix exactly.
template <typename T>
T coarse_match(const T& f_src, const T& f_tgt, double tau = 0.1) {
    if (rows_of(f_src) == 0 || rows_of(f_tgt) == 0) throw EmptyFeatures();
    if (cols_of(f_src) != cols_of(f_tgt)) throw ShapeMismatch("coarse_match: feature widths");
    T s = matmul(normalize_rows(f_src), transpose(normalize_rows(f_tgt)));
    T sharp = scale(s, 1.0 / tau);
    T row = softmax_rows(sharp);
    T col = transpose(softmax_rows(transpose(sharp)));
    return mul(row, col);
}

struct MatchPair {
    std::size_t src = 0, tgt = 0;
    double weight = 0.0;
};

namespace detail {

/// Indices of the k largest entries of one row/column, ties to lower index.
inline std::vector<std::size_t> top_k_indices(const std::vector<double>& vals, std::size_t k) {
    std::vector<std::size_t> idx(vals.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
    idx.resize(std::min(k, idx.size()));
    return idx;
}

}  // namespace detail

/// Mutual top-k selection: keep (i,j) iff j is in row i's top-k and i is in
/// column j's top-k. Pairs come back sorted by (src, tgt).
inline std::vector<MatchPair> extract_coarse_pairs(const Tensor& m, std::size_t top_k = 3) {
    if (top_k == 0) throw DomainError("top_k must be at least 1");
    const std::size_t rows = m.rows(), cols = m.cols();
    std::vector<std::vector<bool>> row_hit(rows, std::vector<bool>(cols, false));
    for (std::size_t i = 0; i < rows; ++i) {
        std::vector<double> vals(cols);
        for (std::size_t j = 0; j < cols; ++j) vals[j] = m(i, j);
        for (std::size_t j : detail::top_k_indices(vals, top_k)) row_hit[i][j] = true;
    }
    std::vector<MatchPair> out;
    for (std::size_t j = 0; j < cols; ++j) {
        std::vector<double> vals(rows);
        for (std::size_t i = 0; i < rows; ++i) vals[i] = m(i, j);
        for (std::size_t i : detail::top_k_indices(vals, top_k))
            if (row_hit[i][j]) out.push_back({i, j, m(i, j)});
    }
    std::sort(out.begin(), out.end(), [](const MatchPair& a, const MatchPair& b) {
        return a.src != b.src ? a.src < b.src : a.tgt < b.tgt;
    });
    return out;
}

// ============================================================================
// Keypoint detection: attention-weighted child centroid per semi-dense node,
// softplus uncertainty head
// ============================================================================

template <typename T>
struct KeypointSetT {
    T positions;    // (K,3), convex combinations of child node positions
    T sigma;        // (K,1), strictly positive
    T descriptors;  // (K,W), the semi-dense node features
    std::vector<std::size_t> nodes;  // semi-dense node index per keypoint
};

using KeypointSet = KeypointSetT<Tensor>;
using KeypointSetVar = KeypointSetT<Var>;

template <typename T>
struct KeypointParamsT {
    T w_score;  // (1,W): child-feature attention logit
    T w_sigma;  // (1,W): uncertainty head
    T b_sigma;  // (1,1)
};

using KeypointParams = KeypointParamsT<Tensor>;
using KeypointParamsVar = KeypointParamsT<Var>;

template <typename T>
KeypointSetT<T> detect_keypoints(const Hierarchy& h, const std::vector<T>& feats,
                                 const KeypointParamsT<T>& p,
                                 std::size_t max_keypoints = 512) {
    const std::size_t sd = semi_dense_level_index(h);
    const HierarchyLevel& level = h.levels[sd];
    const HierarchyLevel& fine = h.levels[sd - 1];
    const std::size_t count = std::min(max_keypoints, level.positions.size());

    KeypointSetT<T> kp;
    std::vector<T> pos_rows;
    pos_rows.reserve(count);
    for (std::size_t j = 0; j < count; ++j) {
        kp.nodes.push_back(j);
        const auto& kids = level.children[j];
        Tensor kid_pos(kids.size(), 3);
        for (std::size_t r = 0; r < kids.size(); ++r)
            for (int a = 0; a < 3; ++a) kid_pos(r, a) = fine.positions[kids[r]][a];
        T kid_feat = gather_rows(feats[sd - 1], kids);
        T logits = transpose(matmul(kid_feat, transpose(p.w_score)));  // (1,nc)
        T attn = softmax_rows(logits);
        pos_rows.push_back(matmul(attn, lift<T>(std::move(kid_pos))));
    }
    kp.positions = concat_rows_n(pos_rows);
    kp.descriptors = gather_rows(feats[sd], kp.nodes);
    T z = add_rows(matmul(kp.descriptors, transpose(p.w_sigma)), p.b_sigma);
    kp.sigma = add_scalar(softplus(z), 1e-12);  // keep sigma strictly positive
    return kp;
}

// ============================================================================
// Keypoint correspondence: bilinear descriptor similarity -> attention over
// target positions, sigmoid inlier confidence
// ============================================================================

template <typename T>
struct KeypointMatchParamsT {
    T bilinear;  // (W,W); similarity uses the symmetrized form
    T gain;      // (1,1) confidence scale
    T bias;      // (1,1) confidence offset
};

using KeypointMatchParams = KeypointMatchParamsT<Tensor>;
using KeypointMatchParamsVar = KeypointMatchParamsT<Var>;

template <typename T>
struct KeypointMatchesT {
    T predicted;   // (K_src,3) attention-weighted target positions
    T confidence;  // (K_src,1) in (0,1)
    T weights;     // (K_src,K_tgt) attention rows
    T similarity;  // (K_src,K_tgt) raw bilinear similarities
};

using KeypointMatches = KeypointMatchesT<Tensor>;

template <typename T>
KeypointMatchesT<T> match_keypoints(const KeypointSetT<T>& src, const KeypointSetT<T>& tgt,
                                    const KeypointMatchParamsT<T>& p, double tau = 0.1) {
    if (rows_of(src.descriptors) == 0 || rows_of(tgt.descriptors) == 0) throw EmptyFeatures();
    T w_sym = scale(add(p.bilinear, transpose(p.bilinear)), 0.5);
    KeypointMatchesT<T> out;
    out.similarity = matmul(matmul(src.descriptors, w_sym), transpose(tgt.descriptors));
    out.weights = softmax_rows(scale(out.similarity, 1.0 / tau));
    out.predicted = matmul(out.weights, tgt.positions);
    T weighted_sim = rowsum(mul(out.weights, out.similarity));
    out.confidence = sigmoid(add_rows(matmul(weighted_sim, p.gain), p.bias));
    return out;
}

// ============================================================================
// Geometric consistency filter: pairwise length-preservation voting
// ============================================================================

/// Votes for each correspondence: the fraction of other pairs whose
/// source/target distances agree within tau_d. Pairs with a majority vote
/// survive; the vote fraction is stored as the inlier score.
inline CorrespondenceSet filter_consistency(const CorrespondenceSet& corr, double tau_d) {
    if (corr.size() < 2)
        throw TooFewCorrespondences("consistency voting needs at least 2 pairs, got " +
                                    std::to_string(corr.size()));
    const std::size_t n = corr.size();
    CorrespondenceSet out;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t votes = 0;
        for (std::size_t l = 0; l < n; ++l) {
            if (l == k) continue;
            const double dx = std::sqrt(sq_dist(corr[k].src, corr[l].src));
            const double dy = std::sqrt(sq_dist(corr[k].tgt, corr[l].tgt));
            if (std::abs(dx - dy) <= tau_d) ++votes;
        }
        const double score = double(votes) / double(n - 1);
        if (score >= 0.5) {
            Correspondence kept = corr[k];
            kept.score = score;
            out.push_back(kept);
        }
    }
    return out;
}

// ============================================================================
// Fine correspondences: pre-align by T0, local attention over radius
// neighbors mixing feature similarity with a proximity prior
// ============================================================================

inline CorrespondenceSet fine_correspondences(const Hierarchy& h_src, const Hierarchy& h_tgt,
                                              const RigidTransform& t0, double radius,
                                              double tau = 0.1) {
    const std::size_t fs = fine_level_index(h_src);
    const std::size_t ft = fine_level_index(h_tgt);
    const HierarchyLevel& src = h_src.levels[fs];
    const HierarchyLevel& tgt = h_tgt.levels[ft];
    if (src.features.rows() != src.positions.size() ||
        tgt.features.rows() != tgt.positions.size())
        throw EmptyFeatures();
    const std::size_t width = src.features.cols();
    const double feat_scale = 1.0 / (std::sqrt(double(width)) * tau);
    // Proximity prior bandwidth. Sharp enough that an exact mate at distance
    // zero dominates stray neighbors near the radius boundary (keeping
    // self-registration exact to ~1e-7), yet ties between equidistant
    // candidates still resolve to their soft barycenter.
    const double h_band = radius / 6.0;

    CorrespondenceSet out;
    for (std::size_t i = 0; i < src.positions.size(); ++i) {
        const Vec3 moved = add(matvec(t0.rotation, src.positions[i]), t0.translation);
        std::vector<std::size_t> nbrs;
        for (std::size_t j = 0; j < tgt.positions.size(); ++j)
            if (sq_dist(moved, tgt.positions[j]) <= radius * radius) nbrs.push_back(j);
        if (nbrs.empty()) continue;

        std::vector<double> logit(nbrs.size());
        double mx = -1e300;
        for (std::size_t r = 0; r < nbrs.size(); ++r) {
            double sim = 0.0;
            for (std::size_t c = 0; c < width; ++c)
                sim += src.features(i, c) * tgt.features(nbrs[r], c);
            const double d2 = sq_dist(moved, tgt.positions[nbrs[r]]);
            logit[r] = sim * feat_scale - d2 / (2.0 * h_band * h_band);
            mx = std::max(mx, logit[r]);
        }
        double z = 0.0;
        for (double& l : logit) {
            l = std::exp(l - mx);
            z += l;
        }
        Vec3 pred{0, 0, 0};
        double conf = 0.0;
        for (std::size_t r = 0; r < nbrs.size(); ++r) {
            const double a = logit[r] / z;
            pred = add(pred, scale(tgt.positions[nbrs[r]], a));
            conf += a * std::exp(-sq_dist(moved, tgt.positions[nbrs[r]]) /
                                 (2.0 * radius * radius));
        }
        Correspondence c;
        c.src = src.positions[i];
        c.tgt = pred;
        c.weight = conf;
        c.score = conf;
        out.push_back(c);
    }
    if (out.empty()) throw NoOverlap("no fine-level points found target neighbors in radius");
    return out;
}

// ============================================================================
// Ground-truth patch overlap for supervision
// ============================================================================

namespace detail {

inline void collect_dense_descendants(const Hierarchy& h, std::size_t level, std::size_t node,
                                      std::vector<std::size_t>& out) {
    if (level == 0) {
        out.push_back(node);
        return;
    }
    for (std::size_t kid : h.levels[level].children[node])
        collect_dense_descendants(h, level - 1, kid, out);
}

}  // namespace detail

/// Dense-point indices underneath one node.
inline std::vector<std::size_t> dense_descendants(const Hierarchy& h, std::size_t level,
                                                  std::size_t node) {
    std::vector<std::size_t> out;
    detail::collect_dense_descendants(h, level, node, out);
    return out;
}

/// Overlap ratio of coarse patches: the fraction of patch-i dense points
/// whose ground-truth-aligned position has a patch-j dense point within
/// `radius`, averaged over both directions.
inline Tensor gt_overlap_matrix(const Hierarchy& h_src, const Hierarchy& h_tgt,
                                const RigidTransform& gt, double radius) {
    const std::size_t ls = h_src.depth() - 1, lt = h_tgt.depth() - 1;
    const std::size_t ns = h_src.top().positions.size(), nt = h_tgt.top().positions.size();

    std::vector<std::vector<Vec3>> src_patches(ns), tgt_patches(nt);
    for (std::size_t i = 0; i < ns; ++i)
        for (std::size_t d : dense_descendants(h_src, ls, i)) {
            const Vec3& p = h_src.dense().positions[d];
            src_patches[i].push_back(add(matvec(gt.rotation, p), gt.translation));
        }
    for (std::size_t j = 0; j < nt; ++j)
        for (std::size_t d : dense_descendants(h_tgt, lt, j))
            tgt_patches[j].push_back(h_tgt.dense().positions[d]);

    auto directed = [&](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
        if (a.empty()) return 0.0;
        std::size_t hit = 0;
        for (const Vec3& p : a)
            for (const Vec3& q : b)
                if (sq_dist(p, q) <= radius * radius) {
                    ++hit;
                    break;
                }
        return double(hit) / double(a.size());
    };

    Tensor o(ns, nt);
    for (std::size_t i = 0; i < ns; ++i)
        for (std::size_t j = 0; j < nt; ++j)
            o(i, j) = 0.5 * (directed(src_patches[i], tgt_patches[j]) +
                             directed(tgt_patches[j], src_patches[i]));
    return o;
}

// ============================================================================
// Seeded parameter helpers
// ============================================================================

inline KeypointParams random_keypoint_params(Rng& rng, std::size_t width) {
    KeypointParams p;
    p.w_score = uniform_tensor(rng, 1, width, 1.0 / std::sqrt(double(width)));
    p.w_sigma = uniform_tensor(rng, 1, width, 1.0 / std::sqrt(double(width)));
    p.b_sigma = Tensor::full(1, 1, 0.5);
    return p;
}

inline KeypointMatchParams random_keypoint_match_params(Rng& rng, std::size_t width) {
    KeypointMatchParams p;
    p.bilinear = uniform_tensor(rng, width, width, 1.0 / std::sqrt(double(width)));
    p.gain = Tensor::full(1, 1, 1.0);
    p.bias = Tensor::full(1, 1, 0.0);
    return p;
}

}  // namespace pcreg
