#include <doctest.h>

#include <cmath>
#include <utility>
#include <vector>

#include "pcreg/backbone.hpp"
#include "pcreg/losses.hpp"
#include "pcreg/matching.hpp"
#include "pcreg/ssm.hpp"

using namespace pcreg;

namespace {

Tensor points(std::initializer_list<Vec3> pts) {
    Tensor t(pts.size(), 3);
    std::size_t i = 0;
    for (const Vec3& p : pts) {
        for (int c = 0; c < 3; ++c) t(i, c) = p[c];
        ++i;
    }
    return t;
}

Tensor column(std::initializer_list<double> vals) {
    Tensor t(vals.size(), 1);
    std::size_t i = 0;
    for (double v : vals) t(i++, 0) = v;
    return t;
}

double scalar(const Tensor& t) {
    REQUIRE(t.rows() == 1);
    REQUIRE(t.cols() == 1);
    return t(0, 0);
}

LossTerms unit_terms() {
    LossTerms t;
    for (Tensor* p : {&t.keypoint, &t.spot, &t.coarse, &t.infonce, &t.keycorr, &t.inlier, &t.pose_t,
                      &t.pose_r})
        *p = Tensor::full(1, 1, 1.0);
    return t;
}

}  // namespace

TEST_SUITE_BEGIN("losses");

// ============================================================================
// Keypoint detection loss
// ============================================================================

TEST_CASE("keypoint loss is near zero for coincident sets with unit uncertainty") {
    Tensor pos = points({{0.1, -0.4, 2.0}, {1.0, 1.0, 1.0}});
    Tensor sig = column({1.0, 1.0});
    CHECK(std::abs(scalar(loss_keypoint(pos, sig, pos, sig))) < 1e-9);
}

TEST_CASE("keypoint loss matches hand-computed single-pair values") {
    Tensor x = points({{0, 0, 0}});
    Tensor y = points({{2, 0, 0}});
    Tensor one = column({1.0});
    // log(1) + 2/1 in each direction.
    CHECK(scalar(loss_keypoint(x, one, y, one)) == doctest::Approx(4.0).epsilon(1e-9));

    Tensor ye = points({{1, 0, 0}});
    const double e = std::exp(1.0);
    Tensor sig_e = column({e});
    // sigma_bar = e on both sides: log(e) + 1/e per direction.
    CHECK(scalar(loss_keypoint(x, sig_e, ye, sig_e)) ==
          doctest::Approx(2.0 * (1.0 + 1.0 / e)).epsilon(1e-9));
}

TEST_CASE("keypoint loss averages each direction over its own set size") {
    Tensor x = points({{0, 0, 0}, {2, 0, 0}});
    Tensor y = points({{0, 0, 0}});
    Tensor sx = column({1.0, 1.0});
    Tensor sy = column({1.0});
    // x->y: (0 + 2)/2 = 1; y->x: nearest is the coincident point, 0.
    CHECK(scalar(loss_keypoint(x, sx, y, sy)) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("keypoint loss breaks nearest-neighbor ties toward the lower index") {
    Tensor x = points({{0, 0, 0}});
    Tensor sx = column({1.0});
    Tensor y = points({{1, 0, 0}, {-1, 0, 0}});  // both at distance 1
    Tensor sy = column({1.0, 3.0});
    // x->y must use y0 (sigma 1): log(1) + 1 = 1.
    // y->x: y0 gives 1; y1 has sigma_bar 2: log(2) + 1/2. Mean of the two.
    const double expect = 1.0 + 0.5 * (1.0 + std::log(2.0) + 0.5);
    CHECK(scalar(loss_keypoint(x, sx, y, sy)) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("keypoint loss goes negative for confident coincident detections") {
    Tensor pos = points({{0, 0, 0}});
    Tensor sig = column({0.01});
    CHECK(scalar(loss_keypoint(pos, sig, pos, sig)) < 0.0);
}

TEST_CASE("keypoint loss rejects empty sets") {
    Tensor pos = points({{0, 0, 0}});
    Tensor sig = column({1.0});
    Tensor none(0, 3), no_sig(0, 1);
    CHECK_THROWS_AS(loss_keypoint(none, no_sig, pos, sig), EmptySet);
    CHECK_THROWS_AS(loss_keypoint(pos, sig, none, no_sig), EmptySet);
}

// ============================================================================
// Spot-matching loss
// ============================================================================

TEST_CASE("spot loss is near zero when matched probabilities are one") {
    Tensor p(2, 2);
    p(0, 0) = 1.0;
    p(1, 1) = 1.0;
    Tensor o(2, 2);
    o(0, 0) = 1.0;
    o(1, 1) = 0.5;
    IndexPairs pairs{{0, 0}, {1, 1}};
    CHECK(std::abs(scalar(loss_spot<Tensor>({p}, o, pairs))) < 1e-9);
}

TEST_CASE("spot loss matches hand-computed weighted cross entropies") {
    const double e = std::exp(1.0);
    Tensor p(2, 2);
    p(0, 0) = 1.0 / e;
    Tensor o(2, 2);
    o(0, 0) = 1.0;
    CHECK(scalar(loss_spot<Tensor>({p}, o, {{0, 0}})) == doctest::Approx(1.0).epsilon(1e-9));

    // Weights (1, 3) on -log P of (1, 2): (1*1 + 3*2)/4.
    Tensor p2(2, 2);
    p2(0, 0) = 1.0 / e;
    p2(1, 1) = 1.0 / (e * e);
    Tensor o2(2, 2);
    o2(0, 0) = 1.0;
    o2(1, 1) = 3.0;
    IndexPairs pairs{{0, 0}, {1, 1}};
    CHECK(scalar(loss_spot<Tensor>({p2}, o2, pairs)) == doctest::Approx(1.75).epsilon(1e-9));

    // A second layer with squared probabilities doubles the per-layer value.
    Tensor p3(2, 2);
    p3(0, 0) = 1.0 / (e * e);
    p3(1, 1) = 1.0 / (e * e * e * e);
    CHECK(scalar(loss_spot<Tensor>({p2, p3}, o2, pairs)) ==
          doctest::Approx(0.5 * (1.75 + 3.5)).epsilon(1e-9));
}

TEST_CASE("spot loss rejects missing layers and missing supervision") {
    Tensor p(2, 2);
    p(0, 0) = 0.5;
    Tensor o(2, 2);
    o(0, 0) = 1.0;
    CHECK_THROWS_AS(loss_spot<Tensor>({}, o, {{0, 0}}), EmptySet);
    CHECK_THROWS_AS(loss_spot<Tensor>({p}, o, {}), NoGroundTruthPairs);
    Tensor zero(2, 2);
    CHECK_THROWS_AS(loss_spot<Tensor>({p}, zero, {{0, 0}}), NoGroundTruthPairs);
}

// ============================================================================
// Coarse loss with overlap background terms
// ============================================================================

TEST_CASE("coarse loss is near zero for perfect matches and silent background") {
    Tensor p(2, 2);
    p(0, 0) = 1.0;
    Tensor o(2, 2);
    o(0, 0) = 1.0;
    Tensor o_hat_src = column({0.7, 0.0});  // index 1 is background
    Tensor o_hat_tgt = column({0.7, 0.0});
    double v = scalar(loss_coarse(p, o, {{0, 0}}, {1}, {1}, o_hat_src, o_hat_tgt));
    CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("coarse loss penalizes confident background overlap predictions") {
    const double e = std::exp(1.0);
    Tensor p(2, 2);
    p(0, 0) = 1.0;
    Tensor o(2, 2);
    o(0, 0) = 1.0;
    // -log(1 - (1 - 1/e)) = 1 for the single source background node.
    Tensor o_hat_src = column({0.0, 1.0 - 1.0 / e});
    Tensor o_hat_tgt = column({0.0, 0.0});
    double v = scalar(loss_coarse(p, o, {{0, 0}}, {1}, {}, o_hat_src, o_hat_tgt));
    CHECK(v == doctest::Approx(1.0).epsilon(1e-9));

    // Positive term 1.75 plus the same background unit.
    Tensor p2(2, 2);
    p2(0, 0) = 1.0 / e;
    p2(1, 1) = 1.0 / (e * e);
    Tensor o2(2, 2);
    o2(0, 0) = 1.0;
    o2(1, 1) = 3.0;
    double v2 = scalar(loss_coarse(p2, o2, {{0, 0}, {1, 1}}, {1}, {}, o_hat_src, o_hat_tgt));
    // Background index 1 of o_hat_src still holds 1 - 1/e, but here both rows of
    // p2 are supervised, so reuse node 1 purely as a background overlap readout.
    CHECK(v2 == doctest::Approx(2.75).epsilon(1e-9));
}

TEST_CASE("coarse loss with empty background sets reduces to the positive term") {
    const double e = std::exp(1.0);
    Tensor p(2, 2);
    p(0, 0) = 1.0 / e;
    Tensor o(2, 2);
    o(0, 0) = 1.0;
    Tensor o_hat = column({0.9, 0.9});
    double v = scalar(loss_coarse(p, o, {{0, 0}}, {}, {}, o_hat, o_hat));
    CHECK(v == doctest::Approx(1.0).epsilon(1e-9));
    CHECK_THROWS_AS(loss_coarse(p, Tensor(2, 2), {{0, 0}}, {}, {}, o_hat, o_hat),
                    NoGroundTruthPairs);
}

// ============================================================================
// InfoNCE descriptor loss
// ============================================================================

namespace {

Tensor eye(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
}

}  // namespace

TEST_CASE("infonce loss is exactly zero without negatives") {
    Tensor a = points({{1, 0, 0}});
    Tensor none(0, 3);
    CHECK(scalar(loss_infonce(a, a, none, eye(3))) == 0.0);
}

TEST_CASE("infonce loss matches hand-computed log-sum-exp values") {
    Tensor a(1, 2);
    a(0, 0) = 1.0;
    Tensor pos = a;
    Tensor neg = a;  // identical similarity -> log 2
    CHECK(scalar(loss_infonce(a, pos, neg, eye(2))) == doctest::Approx(std::log(2.0)));

    Tensor strong_pos(1, 2);
    strong_pos(0, 0) = 10.0;
    Tensor weak_neg(1, 2);
    weak_neg(0, 0) = -10.0;
    const double expect = std::log1p(std::exp(-20.0));
    double v = scalar(loss_infonce(a, strong_pos, weak_neg, eye(2)));
    CHECK(v == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("infonce loss ignores negatives at the similarity floor") {
    Tensor a(1, 2);
    a(0, 0) = 1.0;
    Tensor pos(1, 2);
    pos(0, 0) = 10.0;
    Tensor neg(1, 2);
    neg(0, 0) = -10.0;
    double base = scalar(loss_infonce(a, pos, neg, eye(2)));

    Tensor neg2(2, 2);
    neg2(0, 0) = -10.0;
    neg2(1, 0) = -1000.0;  // clamped to -50, e^-50 is negligible next to e^10
    double with_floor = scalar(loss_infonce(a, pos, neg2, eye(2)));
    CHECK(std::abs(with_floor - base) < 1e-12);
}

TEST_CASE("infonce loss depends only on the symmetric part of the bilinear form") {
    Rng rng(5);
    Tensor a = uniform_tensor(rng, 3, 4, 0.7);
    Tensor pos = uniform_tensor(rng, 3, 4, 0.7);
    Tensor neg = uniform_tensor(rng, 5, 4, 0.7);
    Tensor v = uniform_tensor(rng, 4, 4, 0.9);
    CHECK(scalar(loss_infonce(a, pos, neg, v)) == scalar(loss_infonce(a, pos, neg, transpose(v))));
    CHECK(scalar(loss_infonce(a, pos, neg, v)) >= 0.0);
}

TEST_CASE("infonce loss rejects empty anchors and misaligned positives") {
    Tensor a(0, 2), pos(1, 2), neg(1, 2);
    CHECK_THROWS_AS(loss_infonce(a, pos, neg, eye(2)), EmptySet);
    Tensor a2(2, 2);
    CHECK_THROWS_AS(loss_infonce(a2, pos, neg, eye(2)), ShapeMismatch);
}

// ============================================================================
// Keypoint correspondence loss
// ============================================================================

TEST_CASE("correspondence loss is near zero for exactly transformed points") {
    Rng rng(9);
    Tensor x = uniform_tensor(rng, 6, 3, 1.0);
    RigidTransform gt = random_transform(rng, 45.0, 0.5);
    Tensor y(6, 3);
    for (std::size_t i = 0; i < 6; ++i) {
        Vec3 p{x(i, 0), x(i, 1), x(i, 2)};
        Vec3 q = gt.apply(p);
        for (int c = 0; c < 3; ++c) y(i, c) = q[c];
    }
    CHECK(std::abs(scalar(loss_keycorr(x, y, gt))) < 1e-9);
}

TEST_CASE("correspondence loss matches hand-computed distances") {
    Tensor x = points({{0, 0, 0}});
    Tensor y = points({{0, 3, 4}});
    CHECK(scalar(loss_keycorr(x, y, RigidTransform::identity())) ==
          doctest::Approx(5.0).epsilon(1e-9));

    Tensor x2 = points({{0, 0, 0}, {1, 0, 0}});
    Tensor y2 = points({{0, 0, 0}, {3, 0, 0}});
    CHECK(scalar(loss_keycorr(x2, y2, RigidTransform::identity())) ==
          doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("correspondence loss rejects empty or mismatched rows") {
    Tensor x(0, 3), y(0, 3);
    CHECK_THROWS_AS(loss_keycorr(x, y, RigidTransform::identity()), EmptySet);
    Tensor x2(2, 3), y2(3, 3);
    CHECK_THROWS_AS(loss_keycorr(x2, y2, RigidTransform::identity()), EmptySet);
}

// ============================================================================
// Inlier classification loss
// ============================================================================

TEST_CASE("inlier loss vanishes on saturated correct scores") {
    Tensor s = column({1.0, 0.0});
    Tensor labels = column({1.0, 0.0});
    CHECK(std::abs(scalar(loss_inlier(s, labels))) < 1e-11);
}

TEST_CASE("inlier loss matches hand-computed cross entropies") {
    Tensor s = column({0.5, 0.5});
    Tensor labels = column({1.0, 0.0});
    CHECK(scalar(loss_inlier(s, labels)) == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    Tensor s2 = column({0.9, 0.2});
    const double expect = -0.5 * (std::log(0.9 + 1e-12) + std::log(0.8 + 1e-12));
    CHECK(scalar(loss_inlier(s2, labels)) == doctest::Approx(expect).epsilon(1e-12));
    CHECK(scalar(loss_inlier(s2, labels)) == doctest::Approx(0.16425).epsilon(1e-3));
}

TEST_CASE("inlier loss validates labels and shapes") {
    Tensor s = column({0.5});
    CHECK_THROWS_AS(loss_inlier(s, column({0.5})), ShapeMismatch);
    CHECK_THROWS_AS(loss_inlier(s, column({1.0, 0.0})), ShapeMismatch);
    CHECK_THROWS_AS(loss_inlier(Tensor(0, 1), Tensor(0, 1)), EmptySet);
}

// ============================================================================
// Pose losses
// ============================================================================

namespace {

Tensor rotation_tensor(const Mat3& r) {
    Tensor t(3, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) t(i, j) = r[i * 3 + j];
    return t;
}

}  // namespace

TEST_CASE("pose losses vanish at the ground truth") {
    Rng rng(13);
    RigidTransform gt = random_transform(rng, 60.0, 1.0);
    Tensor r_hat = rotation_tensor(gt.rotation);
    Tensor t_hat(1, 3);
    for (int c = 0; c < 3; ++c) t_hat(0, c) = gt.translation[c];
    auto [lr, lt] = loss_pose(r_hat, t_hat, gt);
    CHECK(std::abs(scalar(lr)) < 1e-7);
    CHECK(std::abs(scalar(lt)) < 1e-7);
}

TEST_CASE("pose losses match hand-computed defects") {
    // 180 degrees about z against identity: R^T R_gt - I = diag(-2,-2,0).
    Tensor r_hat(3, 3);
    r_hat(0, 0) = -1.0;
    r_hat(1, 1) = -1.0;
    r_hat(2, 2) = 1.0;
    Tensor t_hat(1, 3);
    t_hat(0, 0) = 1.0;
    t_hat(0, 1) = 2.0;
    t_hat(0, 2) = 2.0;
    auto [lr, lt] = loss_pose(r_hat, t_hat, RigidTransform::identity());
    CHECK(scalar(lr) == doctest::Approx(2.0 * std::sqrt(2.0)).epsilon(1e-9));
    CHECK(scalar(lt) == doctest::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("pose losses reject malformed shapes") {
    Tensor bad_r(2, 3), t(1, 3), r = eye(3);
    CHECK_THROWS_AS(loss_pose(bad_r, t, RigidTransform::identity()), ShapeMismatch);
    CHECK_THROWS_AS(loss_pose(r, Tensor(3, 1), RigidTransform::identity()), ShapeMismatch);
}

// ============================================================================
// Weighted total
// ============================================================================

TEST_CASE("total loss applies the documented weights") {
    LossTerms t = unit_terms();
    CHECK(scalar(loss_total(t, LossWeights::outdoor())) == doctest::Approx(29.3));
    CHECK(scalar(loss_total(t, LossWeights::indoor())) == doctest::Approx(39.1));

    LossTerms only_r;
    for (Tensor* p : {&only_r.keypoint, &only_r.spot, &only_r.coarse, &only_r.infonce,
                      &only_r.keycorr, &only_r.inlier, &only_r.pose_t})
        *p = Tensor(1, 1);
    only_r.pose_r = Tensor::full(1, 1, 1.0);
    CHECK(scalar(loss_total(only_r, LossWeights::outdoor())) == doctest::Approx(20.0));
}

TEST_CASE("total loss is linear in each term") {
    LossTerms a = unit_terms();
    LossTerms b = unit_terms();
    b.infonce = Tensor::full(1, 1, 3.5);
    const LossWeights w = LossWeights::outdoor();
    double da = scalar(loss_total(b, w)) - scalar(loss_total(a, w));
    CHECK(da == doctest::Approx(w.lambda_f * 2.5).epsilon(1e-12));

    b = unit_terms();
    b.pose_t = Tensor::full(1, 1, 2.0);
    da = scalar(loss_total(b, w)) - scalar(loss_total(a, w));
    CHECK(da == doctest::Approx(w.lambda_t * 1.0).epsilon(1e-12));
}

TEST_CASE("total loss rejects negative weights") {
    LossWeights w = LossWeights::outdoor();
    w.lambda_k = -1.0;
    CHECK_THROWS_AS(loss_total(unit_terms(), w), DomainError);
}

// ============================================================================
// Gradient checks
// ============================================================================

TEST_CASE("keypoint loss gradients agree with finite differences") {
    Rng rng(21);
    std::vector<Tensor> inputs{uniform_tensor(rng, 5, 3, 1.0), uniform_tensor(rng, 5, 1, 0.4),
                               uniform_tensor(rng, 4, 3, 1.0), uniform_tensor(rng, 4, 1, 0.4)};
    inputs[1] = add_scalar(inputs[1], 0.6);  // keep sigma comfortably positive
    inputs[3] = add_scalar(inputs[3], 0.6);
    auto fn = [](const std::vector<Var>& v) {
        return loss_keypoint(v[0], v[1], v[2], v[3]);
    };
    auto rep = gradcheck(fn, inputs, 1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("spot and coarse loss gradients agree with finite differences") {
    Rng rng(22);
    Tensor p1 = add_scalar(uniform_tensor(rng, 3, 4, 0.4), 0.5);  // in (0.1, 0.9)
    Tensor p2 = add_scalar(uniform_tensor(rng, 3, 4, 0.4), 0.5);
    Tensor overlap(3, 4);
    overlap(0, 1) = 1.0;
    overlap(1, 2) = 0.5;
    overlap(2, 0) = 0.25;
    IndexPairs pairs{{0, 1}, {1, 2}, {2, 0}};

    auto spot_fn = [&](const std::vector<Var>& v) {
        return loss_spot<Var>({v[0], v[1]}, overlap, pairs);
    };
    auto rep = gradcheck(spot_fn, {p1, p2}, 1e-5, 1e-4);
    CHECK(rep.pass);

    Tensor o_hat_src = add_scalar(uniform_tensor(rng, 3, 1, 0.4), 0.5);
    Tensor o_hat_tgt = add_scalar(uniform_tensor(rng, 4, 1, 0.4), 0.5);
    auto coarse_fn = [&](const std::vector<Var>& v) {
        return loss_coarse(v[0], overlap, pairs, {2}, {3}, v[1], v[2]);
    };
    rep = gradcheck(coarse_fn, {p1, o_hat_src, o_hat_tgt}, 1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("infonce loss gradients agree with finite differences") {
    Rng rng(23);
    std::vector<Tensor> inputs{uniform_tensor(rng, 3, 4, 0.5), uniform_tensor(rng, 3, 4, 0.5),
                               uniform_tensor(rng, 5, 4, 0.5), uniform_tensor(rng, 4, 4, 0.5)};
    auto fn = [](const std::vector<Var>& v) {
        return loss_infonce(v[0], v[1], v[2], v[3]);
    };
    auto rep = gradcheck(fn, inputs, 1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("correspondence, inlier, and pose loss gradients agree with finite differences") {
    Rng rng(24);
    RigidTransform gt = random_transform(rng, 30.0, 0.5);
    auto corr_fn = [&gt](const std::vector<Var>& v) {
        return loss_keycorr(v[0], v[1], gt);
    };
    auto rep = gradcheck(corr_fn, {uniform_tensor(rng, 6, 3, 1.0), uniform_tensor(rng, 6, 3, 1.0)},
                         1e-5, 1e-4);
    CHECK(rep.pass);

    Tensor labels = column({1, 0, 1, 1, 0, 0});
    Tensor scores = add_scalar(uniform_tensor(rng, 6, 1, 0.4), 0.5);
    auto inlier_fn = [&labels](const std::vector<Var>& v) {
        return loss_inlier(v[0], labels);
    };
    rep = gradcheck(inlier_fn, {scores}, 1e-5, 1e-4);
    CHECK(rep.pass);

    auto pose_fn = [&gt](const std::vector<Var>& v) {
        auto [lr, lt] = loss_pose(v[0], v[1], gt);
        return add(lr, lt);
    };
    rep = gradcheck(pose_fn, {uniform_tensor(rng, 3, 3, 0.8), uniform_tensor(rng, 1, 3, 0.8)},
                    1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("total loss gradients agree with finite differences") {
    Rng rng(25);
    std::vector<Tensor> inputs;
    for (int i = 0; i < 8; ++i) inputs.push_back(uniform_tensor(rng, 1, 1, 1.0));
    auto fn = [](const std::vector<Var>& v) {
        LossTermsVar t{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
        return loss_total(t, LossWeights::indoor());
    };
    auto rep = gradcheck(fn, inputs, 1e-5, 1e-4);
    CHECK(rep.pass);
}

TEST_CASE("keypoint loss gradients flow through detection on a two-node toy") {
    // Two well-separated clusters so the semi-dense level has exactly two nodes
    // and the nearest-neighbor assignment is unambiguous.
    auto make_cloud = [](double jitter, double shift) {
        PointCloud c;
        Rng rng(static_cast<std::uint64_t>(97 + shift * 10 + jitter * 100));
        for (int i = 0; i < 4; ++i)
            c.points.push_back(Vec3{rng.uniform() * 0.4 + shift, rng.uniform() * 0.4 + jitter,
                                    rng.uniform() * 0.4});
        for (int i = 0; i < 4; ++i)
            c.points.push_back(Vec3{5.0 + rng.uniform() * 0.4 + shift,
                                    rng.uniform() * 0.4 + jitter, rng.uniform() * 0.4});
        return c;
    };
    Hierarchy hs = build_hierarchy(make_cloud(0.0, 0.0), {1.0, 20.0});
    Hierarchy ht = build_hierarchy(make_cloud(0.15, 0.1), {1.0, 20.0});
    REQUIRE(hs.depth() == 3);
    REQUIRE(hs.levels[1].positions.size() == 2);
    REQUIRE(ht.levels[1].positions.size() == 2);

    const std::size_t w = 3;
    Rng rng(26);
    std::vector<Tensor> inputs{
        uniform_tensor(rng, hs.levels[0].positions.size(), w, 0.8),
        uniform_tensor(rng, 2, w, 0.8),
        uniform_tensor(rng, ht.levels[0].positions.size(), w, 0.8),
        uniform_tensor(rng, 2, w, 0.8),
    };
    KeypointParams kp = random_keypoint_params(rng, w);
    inputs.push_back(kp.w_score);
    inputs.push_back(kp.w_sigma);
    inputs.push_back(kp.b_sigma);

    auto fn = [&hs, &ht](const std::vector<Var>& v) {
        KeypointParamsVar p{v[4], v[5], v[6]};
        KeypointSetVar src = detect_keypoints(hs, {v[0], v[1]}, p);
        KeypointSetVar tgt = detect_keypoints(ht, {v[2], v[3]}, p);
        return loss_keypoint(src.positions, src.sigma, tgt.positions, tgt.sigma);
    };
    auto rep = gradcheck(fn, inputs, 1e-5, 1e-4);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err <= 1e-4);
}

// ============================================================================
// Cross-cutting invariants
// ============================================================================

TEST_CASE("every loss except the keypoint term is non-negative on random inputs") {
    Rng rng(27);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor p = add_scalar(uniform_tensor(rng, 3, 3, 0.4), 0.5);
        Tensor o(3, 3);
        o(0, 0) = 1.0;
        o(1, 2) = 0.4;
        IndexPairs pairs{{0, 0}, {1, 2}};
        CHECK(scalar(loss_spot<Tensor>({p}, o, pairs)) >= 0.0);

        Tensor o_hat = add_scalar(uniform_tensor(rng, 3, 1, 0.4), 0.5);
        CHECK(scalar(loss_coarse(p, o, pairs, {2}, {1}, o_hat, o_hat)) >= 0.0);

        Tensor a = uniform_tensor(rng, 2, 3, 1.0);
        CHECK(scalar(loss_infonce(a, uniform_tensor(rng, 2, 3, 1.0), uniform_tensor(rng, 4, 3, 1.0),
                                  uniform_tensor(rng, 3, 3, 1.0))) >= 0.0);

        RigidTransform gt = random_transform(rng, 45.0, 1.0);
        CHECK(scalar(loss_keycorr(a, uniform_tensor(rng, 2, 3, 1.0), gt)) >= 0.0);

        Tensor scores = add_scalar(uniform_tensor(rng, 4, 1, 0.4), 0.5);
        CHECK(scalar(loss_inlier(scores, column({1, 0, 0, 1}))) >= 0.0);

        auto [lr, lt] = loss_pose(uniform_tensor(rng, 3, 3, 1.0), uniform_tensor(rng, 1, 3, 1.0),
                                  gt);
        CHECK(scalar(lr) >= 0.0);
        CHECK(scalar(lt) >= 0.0);
    }
}

TEST_SUITE_END();
