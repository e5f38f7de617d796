#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "pcreg/bench.hpp"

using namespace pcreg;

TEST_SUITE_BEGIN("bench");

TEST_CASE("a single 2x2 matrix product costs 16 floating-point operations") {
    Rng rng(1);
    Tensor a = uniform_tensor(rng, 2, 2, 1.0);
    Tensor b = uniform_tensor(rng, 2, 2, 1.0);
    CostReport r = count_flops([&] { Tensor c = matmul(a, b); });
    CHECK(r.total_flops == 16);
    CHECK(r.flops_by_op.at("matmul") == 16);
}

TEST_CASE("an empty workload costs nothing") {
    CostReport r = count_flops([] {});
    CHECK(r.total_flops == 0);
    CHECK(r.flops_by_op.empty());
    CHECK(r.peak_bytes == 0);
}

TEST_CASE("the total is the sum of the per-op counts") {
    Rng rng(2);
    Tensor a = uniform_tensor(rng, 8, 8, 1.0);
    Tensor b = uniform_tensor(rng, 8, 8, 1.0);
    CostReport r = count_flops([&] {
        Tensor c = matmul(a, b);
        Tensor d = softmax_rows(add(c, a));
        Tensor e = silu(d);
    });
    std::uint64_t sum = 0;
    for (const auto& [op, n] : r.flops_by_op) sum += n;
    CHECK(sum == r.total_flops);
    CHECK(r.total_flops > 0);
}

TEST_CASE("counting is deterministic and additive across repeats") {
    BenchConfig bc;
    CostReport once = measure_path(BenchPath::ssm, 256, bc);
    CostReport again = measure_path(BenchPath::ssm, 256, bc);
    CHECK(once.total_flops == again.total_flops);
    CHECK(once.peak_bytes == again.peak_bytes);

    BenchConfig doubled = bc;
    doubled.blocks = bc.blocks * 2;
    CostReport twice = measure_path(BenchPath::ssm, 256, doubled);
    CHECK(twice.total_flops == 2 * once.total_flops);
}

TEST_CASE("nested cost scopes are rejected") {
    CostMeter outer;
    CostScope scope(outer);
    CostMeter inner;
    CHECK_THROWS_AS(CostScope{inner}, DomainError);
}

TEST_CASE("attention on M tokens is dominated by the 4M^2 d term") {
    Rng rng(5);
    const std::size_t d = 32;
    for (std::size_t m : {256, 512}) {
        Tensor q = uniform_tensor(rng, m, d, 1.0);
        Tensor k = uniform_tensor(rng, m, d, 1.0);
        Tensor v = uniform_tensor(rng, m, d, 1.0);
        CostReport r = count_flops([&] {
            Tensor w = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(d))));
            Tensor out = matmul(w, v);
        });
        const double dominant = 4.0 * double(m) * double(m) * double(d);
        CHECK(std::abs(dominant - double(r.total_flops)) / double(r.total_flops) <= 0.05);
    }
}

TEST_CASE("scaling study validates its inputs") {
    CHECK_THROWS_AS(scaling_study({512}, {BenchPath::ssm}), DomainError);
    CHECK_THROWS_AS(scaling_study({512, 256}, {BenchPath::ssm}), DomainError);
    CHECK_THROWS_AS(scaling_study({256, 512}, {}), DomainError);
    CHECK_THROWS_AS(bench_path_from_name("flash"), DomainError);
}

TEST_CASE("state-space cost doubles with length while attention quadruples") {
    std::vector<ScalingRow> rows =
        scaling_study({256, 512}, {BenchPath::ssm, BenchPath::attn, BenchPath::hybrid});
    REQUIRE(rows.size() == 6);
    const double ssm_ratio = flops_ratio(rows, "ssm", 256, 512);
    const double attn_ratio = flops_ratio(rows, "attn", 256, 512);
    CHECK(ssm_ratio >= 1.8);
    CHECK(ssm_ratio <= 2.2);
    CHECK(attn_ratio >= 3.5);
    CHECK(attn_ratio <= 4.5);

    // The alternating path sits strictly between its two ingredients.
    const double hybrid_ratio = flops_ratio(rows, "hybrid", 256, 512);
    CHECK(hybrid_ratio > ssm_ratio);
    CHECK(hybrid_ratio < attn_ratio);
}

TEST_CASE("study rows serialize to the documented CSV schema") {
    std::vector<ScalingRow> rows = scaling_study({64, 128}, {BenchPath::ssm});
    std::ostringstream csv;
    write_scaling_csv(csv, rows);
    std::istringstream in(csv.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "length,path,flops,peak_bytes,ms");
    std::size_t body = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++body;
    CHECK(body == rows.size());
    CHECK(csv.str().find("64,ssm,") != std::string::npos);
}

TEST_CASE("affine fit recovers exact coefficients and flags curvature") {
    std::vector<double> x{1, 2, 3, 4, 5};
    std::vector<double> linear, quad;
    for (double v : x) {
        linear.push_back(3.0 + 2.0 * v);
        quad.push_back(v * v);
    }
    AffineFit af = fit_affine(x, linear);
    CHECK(af.c0 == doctest::Approx(3.0));
    CHECK(af.c1 == doctest::Approx(2.0));
    CHECK(af.r2 == doctest::Approx(1.0));

    AffineFit bad = fit_affine(x, quad);
    CHECK(bad.r2 < 0.999);

    QuadraticFit qf = fit_quadratic(x, quad);
    CHECK(qf.c2 == doctest::Approx(1.0));
    CHECK(std::abs(qf.c1) < 1e-9);
    CHECK(qf.r2 == doctest::Approx(1.0));

    CHECK_THROWS_AS(fit_affine({1.0}, {2.0}), DomainError);
    CHECK_THROWS_AS(fit_quadratic({1.0, 2.0}, {1.0, 4.0}), DomainError);
}

TEST_CASE("state-space cost is affine in length; attention curvature dominates") {
    std::vector<std::size_t> lengths{256, 512, 1024, 1536};
    std::vector<ScalingRow> rows = scaling_study(lengths, {BenchPath::ssm, BenchPath::attn});
    std::vector<double> xs, ssm, attn;
    for (const ScalingRow& r : rows) {
        if (r.path == "ssm") {
            xs.push_back(double(r.length));
            ssm.push_back(double(r.flops));
        } else {
            attn.push_back(double(r.flops));
        }
    }
    AffineFit af = fit_affine(xs, ssm);
    CHECK(af.r2 >= 0.999);
    QuadraticFit qs = fit_quadratic(xs, ssm);
    const double len = xs.back();
    CHECK(std::abs(qs.c2) * len * len <= 0.01 * std::abs(qs.c1) * len);

    QuadraticFit qa = fit_quadratic(xs, attn);
    CHECK(qa.c2 > 0.0);
    CHECK(qa.c2 * len * len > qa.c1 * len);
}

TEST_SUITE_END();
