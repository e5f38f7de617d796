#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "pcreg/errors.hpp"
#include "pcreg/geom.hpp"

namespace pcreg {

// ============================================================================
// Grid quantization
// ============================================================================

struct GridCoord {
    std::uint32_t x = 0, y = 0, z = 0;
};

struct Quantizer {
    Vec3 origin{0, 0, 0};
    double cell = 1.0;  // > 0 always; degenerate clouds fall back to 1
    int depth = 1;
};

/// Quantizes points onto a 2^depth cube anchored at the min corner, cell size
/// max extent / 2^depth. Points on the far face clamp into the last cell; an
/// axis with zero extent maps to cell 0; a fully degenerate cloud uses cell 1.
inline std::pair<std::vector<GridCoord>, Quantizer> quantize(const PointCloud& cloud, int depth) {
    cloud.require_nonempty();
    if (depth < 1 || depth > 21)
        throw CoordinateOutOfRange("depth must be in [1, 21]");
    Vec3 lo = cloud.points[0], hi = cloud.points[0];
    for (const Vec3& p : cloud.points)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    const double extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
    Quantizer q;
    q.origin = lo;
    q.depth = depth;
    q.cell = extent > 0.0 ? extent / double(1u << depth) : 1.0;

    const std::uint32_t max_cell = (1u << depth) - 1u;
    std::vector<GridCoord> grid(cloud.size());
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        std::array<std::uint32_t, 3> g{};
        for (int a = 0; a < 3; ++a) {
            const double v = (cloud.points[i][a] - lo[a]) / q.cell;
            const auto cell = std::uint32_t(std::min(double(max_cell), std::floor(v)));
            g[std::size_t(a)] = cell;
        }
        grid[i] = {g[0], g[1], g[2]};
    }
    return {std::move(grid), q};
}

// ============================================================================
// Curve codes
// ============================================================================

namespace detail {

/// Spreads the low 21 bits of v so bit b lands at position 3b.
inline std::uint64_t spread3(std::uint64_t v) {
    v &= 0x1fffff;
    v = (v | (v << 32)) & 0x1f00000000ffffULL;
    v = (v | (v << 16)) & 0x1f0000ff0000ffULL;
    v = (v | (v << 8)) & 0x100f00f00f00f00fULL;
    v = (v | (v << 4)) & 0x10c30c30c30c30c3ULL;
    v = (v | (v << 2)) & 0x1249249249249249ULL;
    return v;
}

inline void check_coord(std::uint32_t c, int depth) {
    if (depth < 1 || depth > 21) throw CoordinateOutOfRange("depth must be in [1, 21]");
    if (std::uint64_t(c) >= (1ull << depth))
        throw CoordinateOutOfRange("grid coordinate " + std::to_string(c) +
                                   " does not fit depth " + std::to_string(depth));
}

inline std::uint64_t attach_batch(std::uint64_t code, std::uint32_t batch, int depth) {
    if (batch == 0) return code;
    const int shift = 3 * depth;
    if (shift >= 64 || (std::uint64_t(batch) >> (64 - shift)) != 0)
        throw CoordinateOutOfRange("batch prefix overflows 64-bit code at depth " +
                                   std::to_string(depth));
    return (std::uint64_t(batch) << shift) | code;
}

}  // namespace detail

/// Z-order (Morton) code: bit b of x at position 3b, y at 3b+1, z at 3b+2.
/// An optional batch id is prepended above the 3*depth coordinate bits.
inline std::uint64_t morton_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, int depth,
                                   std::uint32_t batch = 0) {
    detail::check_coord(x, depth);
    detail::check_coord(y, depth);
    detail::check_coord(z, depth);
    const std::uint64_t m =
        detail::spread3(x) | (detail::spread3(y) << 1) | (detail::spread3(z) << 2);
    return detail::attach_batch(m, batch, depth);
}

/// Hilbert code via the transpose form (Skilling's bit manipulations): undo
/// the excess-work transform, Gray-encode, then interleave the transposed
/// axes most-significant-first.
inline std::uint64_t hilbert_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, int depth,
                                    std::uint32_t batch = 0) {
    detail::check_coord(x, depth);
    detail::check_coord(y, depth);
    detail::check_coord(z, depth);
    std::array<std::uint32_t, 3> X{x, y, z};
    const std::uint32_t M = 1u << (depth - 1);

    for (std::uint32_t Q = M; Q > 1; Q >>= 1) {
        const std::uint32_t P = Q - 1;
        for (int i = 0; i < 3; ++i) {
            if (X[std::size_t(i)] & Q) {
                X[0] ^= P;
            } else {
                const std::uint32_t t = (X[0] ^ X[std::size_t(i)]) & P;
                X[0] ^= t;
                X[std::size_t(i)] ^= t;
            }
        }
    }
    X[1] ^= X[0];
    X[2] ^= X[1];
    std::uint32_t t = 0;
    for (std::uint32_t Q = M; Q > 1; Q >>= 1)
        if (X[2] & Q) t ^= Q - 1;
    for (int i = 0; i < 3; ++i) X[std::size_t(i)] ^= t;

    std::uint64_t h = 0;
    for (int b = depth - 1; b >= 0; --b)
        for (int i = 0; i < 3; ++i) h = (h << 1) | ((X[std::size_t(i)] >> b) & 1u);
    return detail::attach_batch(h, batch, depth);
}

/// Lexicographic (x, then y, then z) packing.
inline std::uint64_t xyz_encode(std::uint32_t x, std::uint32_t y, std::uint32_t z, int depth,
                                std::uint32_t batch = 0) {
    detail::check_coord(x, depth);
    detail::check_coord(y, depth);
    detail::check_coord(z, depth);
    const std::uint64_t code = (std::uint64_t(x) << (2 * depth)) |
                               (std::uint64_t(y) << depth) | std::uint64_t(z);
    return detail::attach_batch(code, batch, depth);
}

enum class Curve { zorder, hilbert, xyz, trans_zorder, trans_hilbert, trans_xyz };

inline const char* curve_name(Curve c) {
    switch (c) {
        case Curve::zorder: return "zorder";
        case Curve::hilbert: return "hilbert";
        case Curve::xyz: return "xyz";
        case Curve::trans_zorder: return "trans_zorder";
        case Curve::trans_hilbert: return "trans_hilbert";
        case Curve::trans_xyz: return "trans_xyz";
    }
    return "?";
}

inline Curve curve_from_name(const std::string& s) {
    if (s == "zorder") return Curve::zorder;
    if (s == "hilbert") return Curve::hilbert;
    if (s == "xyz") return Curve::xyz;
    if (s == "trans_zorder") return Curve::trans_zorder;
    if (s == "trans_hilbert") return Curve::trans_hilbert;
    if (s == "trans_xyz") return Curve::trans_xyz;
    throw DomainError("unknown curve '" + s + "'");
}

// ============================================================================
// Serialization order
// ============================================================================

struct SerializedOrder {
    std::vector<std::size_t> order;  // order[r] = input index at rank r
    std::vector<std::size_t> rank;   // rank[i]  = position of input point i
    std::vector<std::uint64_t> code; // code[i]  = curve code of input point i
};

/// Computes the serialization of a cloud along a curve. The trans_* variants
/// cycle the axes (x,y,z) -> (y,z,x) before encoding. Ordering is by
/// (code, grid triple, raw coordinates), so the resulting position sequence
/// is invariant to any permutation of the input points.
inline SerializedOrder serialize_cloud(const PointCloud& cloud, Curve curve, int depth) {
    auto [grid, quant] = quantize(cloud, depth);
    (void)quant;
    const std::size_t n = cloud.size();

    const bool cycled = curve == Curve::trans_zorder || curve == Curve::trans_hilbert ||
                        curve == Curve::trans_xyz;
    SerializedOrder out;
    out.code.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        GridCoord g = grid[i];
        if (cycled) g = {g.y, g.z, g.x};
        const auto batch = std::uint32_t(cloud.batch_of(i));
        switch (curve) {
            case Curve::zorder:
            case Curve::trans_zorder:
                out.code[i] = morton_encode(g.x, g.y, g.z, depth, batch);
                break;
            case Curve::hilbert:
            case Curve::trans_hilbert:
                out.code[i] = hilbert_encode(g.x, g.y, g.z, depth, batch);
                break;
            case Curve::xyz:
            case Curve::trans_xyz:
                out.code[i] = xyz_encode(g.x, g.y, g.z, depth, batch);
                break;
        }
    }

    out.order.resize(n);
    std::iota(out.order.begin(), out.order.end(), std::size_t(0));
    std::sort(out.order.begin(), out.order.end(), [&](std::size_t a, std::size_t b) {
        if (out.code[a] != out.code[b]) return out.code[a] < out.code[b];
        const GridCoord &ga = grid[a], &gb = grid[b];
        const auto ta = std::tie(ga.x, ga.y, ga.z), tb = std::tie(gb.x, gb.y, gb.z);
        if (ta != tb) return ta < tb;
        const Vec3 &pa = cloud.points[a], &pb = cloud.points[b];
        if (pa != pb) return pa < pb;
        return a < b;  // bit-identical duplicates: keep input order
    });

    out.rank.resize(n);
    for (std::size_t r = 0; r < n; ++r) out.rank[out.order[r]] = r;
    return out;
}

/// Mean serial-rank distance from each point to its k nearest 3-D neighbors,
/// divided by the expectation of the same statistic under a random
/// permutation, which is (N+1)/3 for two distinct uniform ranks. Lower is
/// better; a random order scores about 1.
inline double locality_score(const PointCloud& cloud, const SerializedOrder& order,
                             std::size_t k) {
    const std::size_t n = cloud.size();
    if (n < 2) throw TooFewPoints("locality_score requires at least 2 points");
    const auto neighbors = knn(cloud.points, k);
    double acc = 0.0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j : neighbors[i]) {
            const double d = double(order.rank[i]) - double(order.rank[j]);
            acc += std::abs(d);
            ++cnt;
        }
    const double baseline = (double(n) + 1.0) / 3.0;
    return (acc / double(cnt)) / baseline;
}

}  // namespace pcreg
