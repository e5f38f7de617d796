#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <tuple>
#include <vector>

#include "pcreg/attention.hpp"
#include "pcreg/autodiff.hpp"
#include "pcreg/geom.hpp"
#include "pcreg/rng.hpp"
#include "pcreg/tensor.hpp"

namespace pcreg {

// ============================================================================
// Multi-scale hierarchy: voxel-grid downsampling from the dense cloud (level
// 0) to the coarsest anchors (top level). Replaces a learned convolutional
// backbone with voxel centroids plus a local MLP encoder; this is the main
// simplification of the repository and is documented in the README.
// ============================================================================

struct HierarchyLevel {
    std::vector<Vec3> positions;
    /// parent[i] = index of this node's voxel at the next coarser level;
    /// empty at the top level.
    std::vector<std::size_t> parent;
    /// children[j] = indices at the next finer level; empty at level 0.
    std::vector<std::vector<std::size_t>> children;
    Tensor features;  // (n, width), filled by encode_features
};

struct Hierarchy {
    std::vector<HierarchyLevel> levels;  // levels[0] is the dense input
    std::vector<double> voxel_sizes;     // one per downsampling step

    std::size_t depth() const { return levels.size(); }
    const HierarchyLevel& dense() const { return levels.front(); }
    const HierarchyLevel& top() const { return levels.back(); }
};

namespace detail {

using VoxelKey = std::tuple<std::int64_t, std::int64_t, std::int64_t>;

/// Bins points into voxels anchored at the cloud's min corner, so the
/// assignment is invariant under rigid translation of the whole cloud.
inline std::vector<VoxelKey> voxel_keys(const std::vector<Vec3>& pts, double voxel) {
    Vec3 origin = pts.front();
    for (const Vec3& p : pts)
        for (int a = 0; a < 3; ++a) origin[a] = std::min(origin[a], p[a]);
    std::vector<VoxelKey> keys;
    keys.reserve(pts.size());
    for (const Vec3& p : pts)
        keys.emplace_back(std::int64_t(std::floor((p[0] - origin[0]) / voxel)),
                          std::int64_t(std::floor((p[1] - origin[1]) / voxel)),
                          std::int64_t(std::floor((p[2] - origin[2]) / voxel)));
    return keys;
}

}  // namespace detail

/// One voxel-grid downsampling step. Node order is canonical (sorted voxel
/// keys) and centroids are accumulated over coordinate-sorted members, so the
/// result is independent of input point order.
inline HierarchyLevel downsample_level(const std::vector<Vec3>& pts, double voxel,
                                       std::vector<std::size_t>& parent_out) {
    const auto keys = detail::voxel_keys(pts, voxel);
    std::map<detail::VoxelKey, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < pts.size(); ++i) cells[keys[i]].push_back(i);

    HierarchyLevel level;
    level.positions.reserve(cells.size());
    level.children.reserve(cells.size());
    parent_out.assign(pts.size(), 0);
    for (auto& [key, members] : cells) {
        const std::size_t node = level.positions.size();
        std::vector<Vec3> sorted;
        sorted.reserve(members.size());
        for (std::size_t i : members) {
            sorted.push_back(pts[i]);
            parent_out[i] = node;
        }
        std::sort(sorted.begin(), sorted.end());
        Vec3 centroid{0.0, 0.0, 0.0};
        for (const Vec3& p : sorted)
            for (int a = 0; a < 3; ++a) centroid[a] += p[a];
        for (int a = 0; a < 3; ++a) centroid[a] /= double(sorted.size());
        level.positions.push_back(centroid);
        level.children.push_back(std::move(members));
    }
    return level;
}

inline Hierarchy build_hierarchy(const PointCloud& cloud, const std::vector<double>& voxel_sizes) {
    if (cloud.points.empty()) throw EmptyCloud();
    double prev = 0.0;
    for (double v : voxel_sizes) {
        if (v <= prev) throw NonAscendingVoxels();
        prev = v;
    }

    Hierarchy h;
    h.voxel_sizes = voxel_sizes;
    HierarchyLevel dense;
    dense.positions = cloud.points;
    h.levels.push_back(std::move(dense));
    for (double v : voxel_sizes) {
        std::vector<std::size_t> parent;
        HierarchyLevel next = downsample_level(h.levels.back().positions, v, parent);
        h.levels.back().parent = std::move(parent);
        h.levels.push_back(std::move(next));
    }
    return h;
}

inline Tensor positions_tensor(const HierarchyLevel& level) {
    Tensor t(level.positions.size(), 3);
    for (std::size_t i = 0; i < level.positions.size(); ++i)
        for (int a = 0; a < 3; ++a) t(i, a) = level.positions[i][a];
    return t;
}

// ============================================================================
// Feature encoder: bottom-up relative-coordinate MLP + per-node max pooling,
// then a top-down pass that concatenates each intermediate node's feature
// with its parent's and projects back to the working width.
// ============================================================================

template <typename T>
struct MlpParamsT {
    T w1, b1, w2, b2;  // y = SiLU(x W1^T + b1) W2^T + b2
};

template <typename T>
T mlp_apply(const MlpParamsT<T>& p, const T& x) {
    return add_rows(matmul(silu(add_rows(matmul(x, transpose(p.w1)), p.b1)), transpose(p.w2)),
                    p.b2);
}

template <typename T>
struct BackboneParamsT {
    /// up[s] encodes the transition level s -> s+1. up[0] consumes raw
    /// relative coordinates (3); deeper ones consume [rel ; child feature].
    std::vector<MlpParamsT<T>> up;
    /// skip[s] refines level s+1 (the intermediate levels 1..top-1) from
    /// [own feature ; parent feature].
    std::vector<MlpParamsT<T>> skip;
};

using BackboneParams = BackboneParamsT<Tensor>;
using BackboneParamsVar = BackboneParamsT<Var>;

namespace detail {

/// Relative coordinates of every finer-level member grouped by coarse node,
/// in node order, divided by the voxel size so the encoder input is O(1)
/// regardless of the cloud's units. Also returns the flattened child list.
inline Tensor grouped_relative_coords(const HierarchyLevel& fine, const HierarchyLevel& coarse,
                                      double voxel, std::vector<std::size_t>& flat_children) {
    flat_children.clear();
    for (const auto& kids : coarse.children)
        flat_children.insert(flat_children.end(), kids.begin(), kids.end());
    Tensor rel(flat_children.size(), 3);
    std::size_t row = 0;
    for (std::size_t j = 0; j < coarse.children.size(); ++j) {
        for (std::size_t i : coarse.children[j]) {
            for (int a = 0; a < 3; ++a)
                rel(row, a) = (fine.positions[i][a] - coarse.positions[j][a]) / voxel;
            ++row;
        }
    }
    return rel;
}

template <typename T>
T pool_by_group(const T& pre, const std::vector<std::vector<std::size_t>>& children) {
    std::vector<T> pooled;
    pooled.reserve(children.size());
    std::size_t row = 0;
    for (const auto& kids : children) {
        std::vector<std::size_t> range(kids.size());
        for (std::size_t r = 0; r < kids.size(); ++r) range[r] = row + r;
        row += kids.size();
        pooled.push_back(colmax(gather_rows(pre, range)));
    }
    return concat_rows_n(pooled);
}

}  // namespace detail

/// Features for every level, finest first. Geometry is treated as constant;
/// gradients flow through the MLP parameters only.
template <typename T>
std::vector<T> encode_feature_stack(const Hierarchy& h, const BackboneParamsT<T>& p) {
    const std::size_t steps = h.depth() - 1;
    if (p.up.size() != steps) throw ShapeMismatch("encoder: one up-MLP per downsampling step");
    if (steps >= 2 && p.skip.size() != steps - 1)
        throw ShapeMismatch("encoder: one skip-MLP per intermediate level");

    std::vector<T> feats(h.depth());

    // Transition 0 -> 1: the per-point MLP output doubles as the dense
    // feature; level 1 pools it per voxel.
    std::vector<std::size_t> flat;
    Tensor rel0 = detail::grouped_relative_coords(h.levels[0], h.levels[1], h.voxel_sizes[0], flat);
    T pre0 = mlp_apply(p.up[0], lift<T>(std::move(rel0)));
    std::vector<std::size_t> inverse(flat.size());
    for (std::size_t r = 0; r < flat.size(); ++r) inverse[flat[r]] = r;
    feats[0] = gather_rows(pre0, inverse);
    feats[1] = detail::pool_by_group(pre0, h.levels[1].children);

    for (std::size_t s = 1; s < steps; ++s) {
        Tensor rel =
            detail::grouped_relative_coords(h.levels[s], h.levels[s + 1], h.voxel_sizes[s], flat);
        T child = gather_rows(feats[s], flat);
        T pre = mlp_apply(p.up[s], concat_cols(lift<T>(std::move(rel)), child));
        feats[s + 1] = detail::pool_by_group(pre, h.levels[s + 1].children);
    }

    // Top-down refinement of the intermediate levels.
    for (std::size_t lvl = h.depth() - 2; lvl >= 1; --lvl) {
        T from_parent = gather_rows(feats[lvl + 1], h.levels[lvl].parent);
        feats[lvl] = mlp_apply(p.skip[lvl - 1], concat_cols(feats[lvl], from_parent));
    }
    return feats;
}

inline void encode_features(Hierarchy& h, const BackboneParams& p) {
    std::vector<Tensor> feats = encode_feature_stack(h, p);
    for (std::size_t lvl = 0; lvl < h.depth(); ++lvl) h.levels[lvl].features = std::move(feats[lvl]);
}

inline MlpParamsT<Tensor> random_mlp_params(Rng& rng, std::size_t in, std::size_t hidden,
                                            std::size_t out) {
    MlpParamsT<Tensor> p;
    // He-style uniform bounds: sqrt(6/fan_in) ahead of the SiLU (its gain on
    // unit-scale inputs is ~1/sqrt 2), sqrt(3/fan_in) for the linear output.
    p.w1 = uniform_tensor(rng, hidden, in, std::sqrt(6.0 / double(in)));
    p.b1 = Tensor(1, hidden);
    p.w2 = uniform_tensor(rng, out, hidden, std::sqrt(3.0 / double(hidden)));
    p.b2 = Tensor(1, out);
    return p;
}

inline BackboneParams random_backbone_params(Rng& rng, std::size_t levels, std::size_t width) {
    if (levels < 2) throw ShapeMismatch("encoder needs at least two levels");
    BackboneParams p;
    p.up.push_back(random_mlp_params(rng, 3, 2 * width, width));
    for (std::size_t s = 1; s + 1 < levels; ++s)
        p.up.push_back(random_mlp_params(rng, 3 + width, 2 * width, width));
    for (std::size_t s = 0; s + 2 < levels; ++s)
        p.skip.push_back(random_mlp_params(rng, 2 * width, 2 * width, width));
    return p;
}

}  // namespace pcreg
