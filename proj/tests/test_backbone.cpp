#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>
#include <vector>

#include "pcreg/backbone.hpp"

using namespace pcreg;

namespace {

PointCloud random_cloud(Rng& rng, std::size_t n, double extent) {
    PointCloud c;
    c.points.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        c.points.push_back(Vec3{rng.uniform() * extent, rng.uniform() * extent,
                                rng.uniform() * extent});
    return c;
}

/// Brute-force voxel assignment, written independently of the library: bins
/// against the min corner, groups in a set/map, plain-order centroids.
std::vector<Vec3> oracle_downsample(const std::vector<Vec3>& pts, double vox,
                                    std::size_t* count_out) {
    Vec3 mn = pts.front();
    for (const Vec3& p : pts)
        for (int a = 0; a < 3; ++a) mn[a] = std::min(mn[a], p[a]);
    std::map<std::tuple<long long, long long, long long>, std::vector<Vec3>> cells;
    for (const Vec3& p : pts) {
        auto key = std::make_tuple((long long)std::floor((p[0] - mn[0]) / vox),
                                   (long long)std::floor((p[1] - mn[1]) / vox),
                                   (long long)std::floor((p[2] - mn[2]) / vox));
        cells[key].push_back(p);
    }
    std::vector<Vec3> centroids;
    for (auto& [key, members] : cells) {
        Vec3 c{0, 0, 0};
        for (const Vec3& p : members)
            for (int a = 0; a < 3; ++a) c[a] += p[a];
        for (int a = 0; a < 3; ++a) c[a] /= double(members.size());
        centroids.push_back(c);
    }
    if (count_out) *count_out = cells.size();
    return centroids;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.rows() == b.rows());
    REQUIRE(a.cols() == b.cols());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

std::vector<Tensor> pack_mlp(const MlpParamsT<Tensor>& p) { return {p.w1, p.b1, p.w2, p.b2}; }

}  // namespace

TEST_SUITE_BEGIN("backbone");

TEST_CASE("one voxel spanning a cube collapses to its centroid") {
    PointCloud c;
    for (int x = 0; x <= 1; ++x)
        for (int y = 0; y <= 1; ++y)
            for (int z = 0; z <= 1; ++z) c.points.push_back(Vec3{double(x), double(y), double(z)});
    Hierarchy h = build_hierarchy(c, {2.0});
    REQUIRE(h.depth() == 2);
    REQUIRE(h.top().positions.size() == 1);
    CHECK(h.top().positions[0][0] == doctest::Approx(0.5));
    CHECK(h.top().positions[0][1] == doctest::Approx(0.5));
    CHECK(h.top().positions[0][2] == doctest::Approx(0.5));
    CHECK(h.top().children[0].size() == 8);
}

TEST_CASE("points sparser than the voxel give one node per point") {
    PointCloud c;
    c.points = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{2, 2, 2}, Vec3{-1, 0, 1}};
    Hierarchy h = build_hierarchy(c, {0.5});
    REQUIRE(h.top().positions.size() == c.points.size());
    auto sorted_in = c.points;
    auto sorted_out = h.top().positions;
    std::sort(sorted_in.begin(), sorted_in.end());
    std::sort(sorted_out.begin(), sorted_out.end());
    CHECK(sorted_in == sorted_out);  // centroids of singletons are the points themselves
}

TEST_CASE("node counts match an independent voxel-hash oracle") {
    Rng rng(31);
    PointCloud c = random_cloud(rng, 400, 1.0);
    Hierarchy h = build_hierarchy(c, {0.1, 0.2, 0.4});
    REQUIRE(h.depth() == 4);

    std::vector<Vec3> pts = c.points;
    for (std::size_t lvl = 1; lvl < h.depth(); ++lvl) {
        std::size_t count = 0;
        pts = oracle_downsample(pts, h.voxel_sizes[lvl - 1], &count);
        CHECK(h.levels[lvl].positions.size() == count);
    }
}

TEST_CASE("hierarchy construction guards its inputs") {
    PointCloud empty;
    CHECK_THROWS_AS(build_hierarchy(empty, {0.1}), EmptyCloud);
    PointCloud one;
    one.points.push_back(Vec3{0, 0, 0});
    CHECK_THROWS_AS(build_hierarchy(one, {0.2, 0.2}), NonAscendingVoxels);
    CHECK_THROWS_AS(build_hierarchy(one, {0.2, 0.1}), NonAscendingVoxels);
    CHECK_THROWS_AS(build_hierarchy(one, {0.0, 0.1}), NonAscendingVoxels);
    CHECK_THROWS_AS(build_hierarchy(one, {-1.0}), NonAscendingVoxels);
}

TEST_CASE("parent and child maps are total and consistent") {
    Rng rng(32);
    PointCloud c = random_cloud(rng, 300, 1.0);
    Hierarchy h = build_hierarchy(c, {0.08, 0.16, 0.32});

    for (std::size_t lvl = 0; lvl + 1 < h.depth(); ++lvl) {
        const auto& fine = h.levels[lvl];
        const auto& coarse = h.levels[lvl + 1];
        CHECK(coarse.positions.size() <= fine.positions.size());  // never grows upward
        REQUIRE(fine.parent.size() == fine.positions.size());
        std::size_t total_children = 0;
        for (std::size_t j = 0; j < coarse.children.size(); ++j) {
            CHECK(!coarse.children[j].empty());
            total_children += coarse.children[j].size();
            for (std::size_t i : coarse.children[j]) CHECK(fine.parent[i] == j);
        }
        CHECK(total_children == fine.positions.size());
    }

    // Composing parent maps from the dense level reaches every top node.
    std::set<std::size_t> reached;
    for (std::size_t i = 0; i < h.dense().positions.size(); ++i) {
        std::size_t node = i;
        for (std::size_t lvl = 0; lvl + 1 < h.depth(); ++lvl) node = h.levels[lvl].parent[node];
        reached.insert(node);
    }
    CHECK(reached.size() == h.top().positions.size());
}

TEST_CASE("all-zero weights produce all-zero features") {
    Rng rng(33);
    PointCloud c = random_cloud(rng, 60, 1.0);
    Hierarchy h = build_hierarchy(c, {0.2, 0.4, 0.8});
    BackboneParams p = random_backbone_params(rng, h.depth(), 4);
    for (auto* group : {&p.up, &p.skip})
        for (auto& mlp : *group) {
            mlp.w1 = Tensor(mlp.w1.rows(), mlp.w1.cols());
            mlp.b1 = Tensor(mlp.b1.rows(), mlp.b1.cols());
            mlp.w2 = Tensor(mlp.w2.rows(), mlp.w2.cols());
            mlp.b2 = Tensor(mlp.b2.rows(), mlp.b2.cols());
        }
    encode_features(h, p);
    for (const auto& level : h.levels) {
        REQUIRE(level.features.rows() == level.positions.size());
        for (double v : level.features.data()) CHECK(v == 0.0);
    }
}

TEST_CASE("features are invariant to input point order") {
    Rng rng(34);
    PointCloud c = random_cloud(rng, 80, 1.0);
    std::vector<std::size_t> perm(c.points.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
    PointCloud shuffled;
    for (std::size_t i : perm) shuffled.points.push_back(c.points[i]);

    const std::vector<double> sizes{0.15, 0.3, 0.6};
    Hierarchy ha = build_hierarchy(c, sizes);
    Hierarchy hb = build_hierarchy(shuffled, sizes);
    BackboneParams p = random_backbone_params(rng, ha.depth(), 6);
    encode_features(ha, p);
    encode_features(hb, p);

    // Coarse levels use canonical (voxel-key) node order: positions and
    // features must agree exactly.
    for (std::size_t lvl = 1; lvl < ha.depth(); ++lvl) {
        REQUIRE(ha.levels[lvl].positions.size() == hb.levels[lvl].positions.size());
        for (std::size_t j = 0; j < ha.levels[lvl].positions.size(); ++j)
            for (int a = 0; a < 3; ++a)
                CHECK(ha.levels[lvl].positions[j][a] == hb.levels[lvl].positions[j][a]);
        CHECK(max_abs_diff(ha.levels[lvl].features, hb.levels[lvl].features) <= 1e-12);
    }
    // The dense level follows input order: row i of the shuffled run matches
    // row perm[i] of the original.
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t cix = 0; cix < ha.levels[0].features.cols(); ++cix)
            CHECK(hb.levels[0].features(i, cix) ==
                  doctest::Approx(ha.levels[0].features(perm[i], cix)).epsilon(1e-12));
}

TEST_CASE("rigid translation shifts positions but not features") {
    Rng rng(35);
    PointCloud c = random_cloud(rng, 70, 1.0);
    PointCloud moved;
    const Vec3 t{10.25, -3.5, 7.125};
    for (const Vec3& p : c.points) moved.points.push_back(Vec3{p[0] + t[0], p[1] + t[1], p[2] + t[2]});

    const std::vector<double> sizes{0.15, 0.3, 0.6};
    Hierarchy ha = build_hierarchy(c, sizes);
    Hierarchy hb = build_hierarchy(moved, sizes);
    BackboneParams p = random_backbone_params(rng, ha.depth(), 5);
    encode_features(ha, p);
    encode_features(hb, p);

    for (std::size_t lvl = 0; lvl < ha.depth(); ++lvl) {
        REQUIRE(ha.levels[lvl].positions.size() == hb.levels[lvl].positions.size());
        CHECK(max_abs_diff(ha.levels[lvl].features, hb.levels[lvl].features) <= 1e-9);
    }
    for (std::size_t j = 0; j < ha.top().positions.size(); ++j)
        for (int a = 0; a < 3; ++a)
            CHECK(hb.top().positions[j][a] ==
                  doctest::Approx(ha.top().positions[j][a] + t[a]).epsilon(1e-9));
}

TEST_CASE("gradients through the encoder check out on a 50-point cloud") {
    Rng rng(36);
    PointCloud c = random_cloud(rng, 50, 1.0);
    Hierarchy h = build_hierarchy(c, {0.25, 0.5, 1.0});
    BackboneParams p = random_backbone_params(rng, h.depth(), 4);

    std::vector<Tensor> inputs;
    for (const auto& mlp : p.up)
        for (const Tensor& t : pack_mlp(mlp)) inputs.push_back(t);
    for (const auto& mlp : p.skip)
        for (const Tensor& t : pack_mlp(mlp)) inputs.push_back(t);

    const std::size_t n_up = p.up.size(), n_skip = p.skip.size();
    auto fn = [&h, n_up, n_skip](const std::vector<Var>& v) {
        BackboneParamsVar bp;
        std::size_t ix = 0;
        for (std::size_t s = 0; s < n_up; ++s) {
            MlpParamsT<Var> m;
            m.w1 = v[ix++];
            m.b1 = v[ix++];
            m.w2 = v[ix++];
            m.b2 = v[ix++];
            bp.up.push_back(m);
        }
        for (std::size_t s = 0; s < n_skip; ++s) {
            MlpParamsT<Var> m;
            m.w1 = v[ix++];
            m.b1 = v[ix++];
            m.w2 = v[ix++];
            m.b2 = v[ix++];
            bp.skip.push_back(m);
        }
        auto feats = encode_feature_stack(h, bp);
        Var acc = sum_all(mul(feats.back(), feats.back()));
        for (std::size_t lvl = 0; lvl + 1 < feats.size(); ++lvl)
            acc = add(acc, sum_all(mul(feats[lvl], feats[lvl])));
        return acc;
    };
    auto rep = gradcheck(fn, inputs, 1e-4, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("hierarchy build and encode are deterministic") {
    Rng rng(37);
    PointCloud c = random_cloud(rng, 90, 1.0);
    Hierarchy ha = build_hierarchy(c, {0.1, 0.2, 0.4});
    Hierarchy hb = build_hierarchy(c, {0.1, 0.2, 0.4});
    Rng r1(99), r2(99);
    BackboneParams p1 = random_backbone_params(r1, ha.depth(), 6);
    BackboneParams p2 = random_backbone_params(r2, hb.depth(), 6);
    encode_features(ha, p1);
    encode_features(hb, p2);
    for (std::size_t lvl = 0; lvl < ha.depth(); ++lvl)
        CHECK(max_abs_diff(ha.levels[lvl].features, hb.levels[lvl].features) == 0.0);
}

TEST_SUITE_END();
