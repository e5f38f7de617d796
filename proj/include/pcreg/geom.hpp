#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "pcreg/errors.hpp"
#include "pcreg/rng.hpp"

namespace pcreg {

// ============================================================================
// Small fixed-size linear algebra (row-major 3x3)
// ============================================================================

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double sq_dist(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

inline Mat3 identity3() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Vec3 matvec(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Mat3 matmul3(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
            c[i * 3 + j] = s;
        }
    return c;
}

inline Mat3 transpose3(const Mat3& m) {
    return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

inline double det3(const Mat3& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

inline double trace3(const Mat3& m) { return m[0] + m[4] + m[8]; }

/// Rodrigues rotation about a unit axis.
inline Mat3 axis_angle_rotation(const Vec3& axis, double angle_rad) {
    const double c = std::cos(angle_rad), s = std::sin(angle_rad), t = 1.0 - c;
    const double x = axis[0], y = axis[1], z = axis[2];
    return {t * x * x + c,     t * x * y - s * z, t * x * z + s * y,
            t * x * y + s * z, t * y * y + c,     t * y * z - s * x,
            t * x * z - s * y, t * y * z + s * x, t * z * z + c};
}

// ============================================================================
// Point clouds and rigid transforms
// ============================================================================

/// N x 3 float64 coordinates with an optional per-point batch id.
/// An empty batch vector means every point belongs to batch 0.
struct PointCloud {
    std::vector<Vec3> points;
    std::vector<std::int32_t> batch;

    std::size_t size() const { return points.size(); }
    bool empty() const { return points.empty(); }

    std::int32_t batch_of(std::size_t i) const {
        return batch.empty() ? 0 : batch[i];
    }

    void require_nonempty() const {
        if (points.empty()) throw EmptyCloud();
    }
};

/// Rotation (orthonormal, det +1) plus translation; maps x to R x + t.
struct RigidTransform {
    Mat3 rotation = identity3();
    Vec3 translation{0, 0, 0};

    static RigidTransform identity() { return {}; }

    Vec3 apply(const Vec3& p) const { return add(matvec(rotation, p), translation); }
};

/// Frobenius distance of R^T R from the identity; used to validate rotations.
inline double rotation_defect(const Mat3& r) {
    const Mat3 g = matmul3(transpose3(r), r);
    double s = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double d = g[i * 3 + j] - (i == j ? 1.0 : 0.0);
            s += d * d;
        }
    return std::sqrt(s);
}

inline void require_rotation(const Mat3& r, double tol = 1e-9) {
    if (rotation_defect(r) > tol || std::abs(det3(r) - 1.0) > tol)
        throw DegenerateConfiguration("matrix is not a proper rotation");
}

inline PointCloud apply_transform(const PointCloud& cloud, const RigidTransform& t) {
    cloud.require_nonempty();
    PointCloud out;
    out.points.reserve(cloud.size());
    for (const Vec3& p : cloud.points) out.points.push_back(t.apply(p));
    out.batch = cloud.batch;
    return out;
}

/// compose(a, b) applies b first, then a: (a o b)(x) = a(b(x)).
inline RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform c;
    c.rotation = matmul3(a.rotation, b.rotation);
    c.translation = add(matvec(a.rotation, b.translation), a.translation);
    return c;
}

inline RigidTransform invert(const RigidTransform& t) {
    RigidTransform inv;
    inv.rotation = transpose3(t.rotation);
    inv.translation = scale(matvec(inv.rotation, t.translation), -1.0);
    return inv;
}

// ============================================================================
// Registration metrics
// ============================================================================

/// Relative rotation error in degrees: the geodesic angle between rotations.
/// Uses atan2(sin, cos) of the relative rotation; unlike the plain acos form
/// this keeps full precision for near-identity residuals.
inline double rre_deg(const Mat3& r_est, const Mat3& r_gt) {
    const Mat3 rel = matmul3(transpose3(r_est), r_gt);
    const Vec3 vee{(rel[7] - rel[5]) * 0.5, (rel[2] - rel[6]) * 0.5, (rel[3] - rel[1]) * 0.5};
    const double s = norm(vee);
    const double c = (trace3(rel) - 1.0) / 2.0;
    return std::atan2(s, c) * (180.0 / 3.14159265358979323846);
}

inline double rte(const Vec3& t_est, const Vec3& t_gt) { return norm(sub(t_est, t_gt)); }

struct RegistrationMetrics {
    double rre_deg = 0.0;
    double rte = 0.0;
    bool success = false;
};

inline RegistrationMetrics evaluate_transform(const RigidTransform& est,
                                              const RigidTransform& gt,
                                              double rot_thresh_deg = 5.0,
                                              double trans_thresh = 2.0) {
    RegistrationMetrics m;
    m.rre_deg = rre_deg(est.rotation, gt.rotation);
    m.rte = rte(est.translation, gt.translation);
    m.success = (m.rre_deg <= rot_thresh_deg) && (m.rte <= trans_thresh);
    return m;
}

inline double registration_recall(const std::vector<RegistrationMetrics>& all) {
    if (all.empty()) throw EmptySet("recall over an empty metric set");
    std::size_t ok = 0;
    for (const auto& m : all) ok += m.success ? 1 : 0;
    return double(ok) / double(all.size());
}

// ============================================================================
// Neighborhood queries (brute force; desk-scale clouds)
// ============================================================================

/// Indices of the k nearest neighbors of each point, self excluded,
/// ties broken toward the lower index. k is clamped to n-1.
inline std::vector<std::vector<std::size_t>> knn(const std::vector<Vec3>& pts, std::size_t k) {
    const std::size_t n = pts.size();
    if (n < 2) throw TooFewPoints("knn requires at least 2 points");
    k = std::min(k, n - 1);
    std::vector<std::vector<std::size_t>> out(n);
    std::vector<std::pair<double, std::size_t>> cand;
    cand.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) cand.emplace_back(sq_dist(pts[i], pts[j]), j);
        std::partial_sort(cand.begin(), cand.begin() + std::ptrdiff_t(k), cand.end());
        out[i].reserve(k);
        for (std::size_t m = 0; m < k; ++m) out[i].push_back(cand[m].second);
    }
    return out;
}

/// For each query point, indices of reference points within radius (inclusive).
inline std::vector<std::vector<std::size_t>> radius_neighbors(const std::vector<Vec3>& query,
                                                              const std::vector<Vec3>& ref,
                                                              double radius) {
    const double r2 = radius * radius;
    std::vector<std::vector<std::size_t>> out(query.size());
    for (std::size_t i = 0; i < query.size(); ++i)
        for (std::size_t j = 0; j < ref.size(); ++j)
            if (sq_dist(query[i], ref[j]) <= r2) out[i].push_back(j);
    return out;
}

/// Median nearest-neighbor spacing; scale reference for overlap radii.
inline double median_nn_spacing(const std::vector<Vec3>& pts) {
    if (pts.size() < 2) throw TooFewPoints("spacing requires at least 2 points");
    std::vector<double> d(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < pts.size(); ++j)
            if (j != i) best = std::min(best, sq_dist(pts[i], pts[j]));
        d[i] = std::sqrt(best);
    }
    std::nth_element(d.begin(), d.begin() + std::ptrdiff_t(d.size() / 2), d.end());
    return d[d.size() / 2];
}

// ============================================================================
// Random rigid motions
// ============================================================================

inline Vec3 random_unit_vector(Rng& rng) {
    while (true) {
        Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = norm(v);
        if (n > 1e-12) return scale(v, 1.0 / n);
    }
}

/// Rotation by a uniform angle in [0, max_deg] about a random axis.
inline Mat3 random_rotation(Rng& rng, double max_deg) {
    if (max_deg == 0.0) return identity3();
    const Vec3 axis = random_unit_vector(rng);
    const double ang = rng.uniform(0.0, max_deg * 3.14159265358979323846 / 180.0);
    return axis_angle_rotation(axis, ang);
}

inline RigidTransform random_transform(Rng& rng, double max_rot_deg, double max_trans) {
    RigidTransform t;
    t.rotation = random_rotation(rng, max_rot_deg);
    if (max_trans > 0.0) {
        const Vec3 dir = random_unit_vector(rng);
        t.translation = scale(dir, rng.uniform(0.0, max_trans));
    }
    return t;
}

}  // namespace pcreg
