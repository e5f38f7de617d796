#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "pcreg/geom.hpp"

namespace pcreg {

// ============================================================================
// 3x3 SVD by one-sided Jacobi: deterministic, dependency-free, exact enough
// for cross-covariance factorization (reconstruction error ~1e-14)
// ============================================================================

struct Svd3 {
    Mat3 u;     // columns are left singular vectors
    Vec3 sigma; // descending, non-negative
    Mat3 v;     // columns are right singular vectors
};

inline Svd3 svd3(const Mat3& a) {
    // One-sided Jacobi on columns: find V so the columns of A*V are
    // orthogonal; their norms are the singular values.
    std::array<Vec3, 3> b{Vec3{a[0], a[3], a[6]}, Vec3{a[1], a[4], a[7]}, Vec3{a[2], a[5], a[8]}};
    std::array<Vec3, 3> v{Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};

    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < 2; ++p) {
            for (int q = p + 1; q < 3; ++q) {
                const double app = dot(b[p], b[p]);
                const double aqq = dot(b[q], b[q]);
                const double apq = dot(b[p], b[q]);
                if (apq * apq <= 1e-32 * app * aqq) continue;
                rotated = true;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                const Vec3 bp = b[p], bq = b[q];
                b[p] = sub(scale(bp, c), scale(bq, s));
                b[q] = add(scale(bp, s), scale(bq, c));
                const Vec3 vp = v[p], vq = v[q];
                v[p] = sub(scale(vp, c), scale(vq, s));
                v[q] = add(scale(vp, s), scale(vq, c));
            }
        }
        if (!rotated) break;
    }

    std::array<double, 3> sig{norm(b[0]), norm(b[1]), norm(b[2])};
    std::array<int, 3> ord{0, 1, 2};
    std::sort(ord.begin(), ord.end(), [&](int i, int j) { return sig[i] > sig[j]; });

    Svd3 out;
    std::array<Vec3, 3> ucols;
    for (int j = 0; j < 3; ++j) {
        const int src = ord[j];
        out.sigma[j] = sig[src];
        ucols[j] = sig[src] > 0.0 ? scale(b[src], 1.0 / sig[src]) : Vec3{0, 0, 0};
        for (int r = 0; r < 3; ++r) out.v[r * 3 + j] = v[src][r];
    }
    // Complete U to an orthonormal basis when trailing singular values vanish.
    if (out.sigma[0] == 0.0) ucols[0] = Vec3{1, 0, 0};
    if (out.sigma[1] <= 1e-300) {
        Vec3 seed = std::abs(ucols[0][0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
        Vec3 c = cross(ucols[0], seed);
        ucols[1] = scale(c, 1.0 / norm(c));
    }
    if (out.sigma[2] <= 1e-300) ucols[2] = cross(ucols[0], ucols[1]);
    for (int j = 0; j < 3; ++j)
        for (int r = 0; r < 3; ++r) out.u[r * 3 + j] = ucols[j][r];
    return out;
}

// ============================================================================
// Weighted rigid alignment (Kabsch with weights)
// ============================================================================

struct Correspondence {
    Vec3 src, tgt;
    double weight = 1.0;
    double score = 1.0;  // inlier confidence in [0,1]
};

using CorrespondenceSet = std::vector<Correspondence>;

inline double alignment_objective(const CorrespondenceSet& corr, const RigidTransform& t) {
    double obj = 0.0;
    for (const Correspondence& c : corr)
        obj += c.weight * sq_dist(add(matvec(t.rotation, c.src), t.translation), c.tgt);
    return obj;
}

/// Global minimizer of sum_k w_k ||R x_k + t - y_k||^2 over SO(3) x R^3:
/// remove weighted centroids, factor the cross-covariance H = sum w x~ y~^T,
/// R = V diag(1,1,det(VU^T)) U^T, t = y_bar - R x_bar.
inline RigidTransform weighted_svd(const CorrespondenceSet& corr) {
    if (corr.size() < 3)
        throw InsufficientPairs("need at least 3 correspondences, got " +
                                std::to_string(corr.size()));
    double wsum = 0.0;
    for (const Correspondence& c : corr) {
        if (c.weight < 0.0) throw InsufficientPairs("negative correspondence weight");
        wsum += c.weight;
    }
    if (wsum <= 0.0) throw InsufficientPairs("total correspondence weight must be positive");

    Vec3 xbar{0, 0, 0}, ybar{0, 0, 0};
    for (const Correspondence& c : corr) {
        xbar = add(xbar, scale(c.src, c.weight));
        ybar = add(ybar, scale(c.tgt, c.weight));
    }
    xbar = scale(xbar, 1.0 / wsum);
    ybar = scale(ybar, 1.0 / wsum);

    Mat3 h{};
    for (const Correspondence& c : corr) {
        const Vec3 x = sub(c.src, xbar), y = sub(c.tgt, ybar);
        for (int r = 0; r < 3; ++r)
            for (int col = 0; col < 3; ++col) h[r * 3 + col] += c.weight * x[r] * y[col];
    }

    const Svd3 f = svd3(h);
    if (f.sigma[1] <= 1e-12 * std::max(f.sigma[0], 1e-300))
        throw DegenerateConfiguration("weighted correspondences are collinear (rank < 2)");

    const double d = det3(matmul3(f.v, transpose3(f.u)));
    Mat3 corr_sign = identity3();
    corr_sign[8] = d < 0.0 ? -1.0 : 1.0;
    RigidTransform out;
    out.rotation = matmul3(matmul3(f.v, corr_sign), transpose3(f.u));
    out.translation = sub(ybar, matvec(out.rotation, xbar));
    return out;
}

}  // namespace pcreg
