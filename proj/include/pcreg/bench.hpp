#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "pcreg/attention.hpp"
#include "pcreg/rng.hpp"
#include "pcreg/ssm.hpp"

namespace pcreg {

// ============================================================================
// Cost reports
// ============================================================================

struct CostReport {
    std::map<std::string, std::uint64_t> flops_by_op;
    std::uint64_t total_flops = 0;
    std::uint64_t peak_bytes = 0;  // high-water mark of live tensor payload
    double ms = 0.0;               // wall time; reported, never asserted
};

/// Runs `work` under a fresh cost meter and returns exact counts. Only tensor
/// operations are counted, per the conventions in the numeric module.
inline CostReport count_flops(const std::function<void()>& work) {
    CostMeter meter;
    const auto t0 = std::chrono::steady_clock::now();
    {
        CostScope scope(meter);
        work();
    }
    const auto dt = std::chrono::steady_clock::now() - t0;
    CostReport r;
    r.flops_by_op = meter.flops_by_op;
    r.total_flops = meter.total_flops;
    r.peak_bytes = meter.peak_bytes;
    r.ms = std::chrono::duration<double, std::milli>(dt).count();
    return r;
}

// ============================================================================
// Sequence-length scaling study
// ============================================================================

enum class BenchPath { ssm, attn, hybrid };

inline const char* bench_path_name(BenchPath p) {
    switch (p) {
        case BenchPath::ssm: return "ssm";
        case BenchPath::attn: return "attn";
        case BenchPath::hybrid: return "hybrid";
    }
    throw DomainError("invalid bench path");
}

inline BenchPath bench_path_from_name(const std::string& name) {
    if (name == "ssm") return BenchPath::ssm;
    if (name == "attn") return BenchPath::attn;
    if (name == "hybrid") return BenchPath::hybrid;
    throw DomainError("unknown bench path: " + name);
}

struct BenchConfig {
    std::size_t width = 8;
    std::size_t blocks = 2;      // equal block budget across paths
    std::size_t ssm_state = 4;
    std::size_t ssm_expand = 2;
    std::uint64_t seed = 7;
};

struct ScalingRow {
    std::size_t length = 0;
    std::string path;
    std::uint64_t flops = 0;
    std::uint64_t peak_bytes = 0;
    double ms = 0.0;
};

/// Cost of running `blocks` encoder blocks over a sequence of the given
/// length: state-space blocks on the ssm path, self-attention blocks on the
/// attn path, and strict alternation (state-space first) on the hybrid path.
inline CostReport measure_path(BenchPath path, std::size_t length, const BenchConfig& bc) {
    Rng rng(bc.seed);
    MambaParams mamba = random_mamba_params(rng, bc.width, bc.ssm_expand, bc.ssm_state);
    AttentionParams attn = random_attention_params(rng, bc.width);
    Tensor x = uniform_tensor(rng, length, bc.width, 1.0);
    return count_flops([&] {
        Tensor h = x;
        for (std::size_t b = 0; b < bc.blocks; ++b) {
            const bool use_ssm = path == BenchPath::ssm ||
                                 (path == BenchPath::hybrid && b % 2 == 0);
            h = use_ssm ? mamba_block(mamba, h) : self_attention_block(attn, h);
        }
    });
}

inline std::vector<ScalingRow> scaling_study(const std::vector<std::size_t>& lengths,
                                             const std::vector<BenchPath>& paths,
                                             const BenchConfig& bc = {}) {
    if (lengths.size() < 2) throw DomainError("scaling study needs at least two lengths");
    for (std::size_t i = 1; i < lengths.size(); ++i)
        if (lengths[i] <= lengths[i - 1]) throw DomainError("lengths must be ascending");
    if (paths.empty()) throw DomainError("scaling study needs at least one path");

    std::vector<ScalingRow> rows;
    for (BenchPath p : paths)
        for (std::size_t m : lengths) {
            CostReport r = measure_path(p, m, bc);
            rows.push_back({m, bench_path_name(p), r.total_flops, r.peak_bytes, r.ms});
        }
    return rows;
}

inline void write_scaling_csv(std::ostream& out, const std::vector<ScalingRow>& rows) {
    out << "length,path,flops,peak_bytes,ms\n";
    for (const ScalingRow& r : rows)
        out << r.length << ',' << r.path << ',' << r.flops << ',' << r.peak_bytes << ',' << r.ms
            << '\n';
}

/// flops(b) / flops(a) for one path within a study table.
inline double flops_ratio(const std::vector<ScalingRow>& rows, const std::string& path,
                          std::size_t len_a, std::size_t len_b) {
    const ScalingRow* a = nullptr;
    const ScalingRow* b = nullptr;
    for (const ScalingRow& r : rows) {
        if (r.path != path) continue;
        if (r.length == len_a) a = &r;
        if (r.length == len_b) b = &r;
    }
    if (!a || !b) throw DomainError("ratio endpoints missing from study table");
    if (a->flops == 0) throw DomainError("zero-cost baseline in ratio");
    return double(b->flops) / double(a->flops);
}

// ============================================================================
// Least-squares fits for the complexity assertions
// ============================================================================

struct AffineFit {
    double c0 = 0.0, c1 = 0.0;
    double r2 = 1.0;
};

struct QuadraticFit {
    double c0 = 0.0, c1 = 0.0, c2 = 0.0;
    double r2 = 1.0;
};

namespace detail {

/// Solves the small SPD normal-equation system in place (Gaussian elimination
/// with partial pivoting; n is 2 or 3 here).
inline std::vector<double> solve_dense(std::vector<std::vector<double>> a, std::vector<double> b) {
    const std::size_t n = b.size();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
        std::swap(a[col], a[piv]);
        std::swap(b[col], b[piv]);
        if (a[col][col] == 0.0) throw DomainError("singular normal equations in fit");
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[r][col] / a[col][col];
            for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
            b[r] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t ri = n; ri-- > 0;) {
        double s = b[ri];
        for (std::size_t c = ri + 1; c < n; ++c) s -= a[ri][c] * x[c];
        x[ri] = s / a[ri][ri];
    }
    return x;
}

inline double r_squared(const std::vector<double>& y, const std::vector<double>& fitted) {
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= double(y.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        ss_res += (y[i] - fitted[i]) * (y[i] - fitted[i]);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    if (ss_tot == 0.0) return 1.0;
    return 1.0 - ss_res / ss_tot;
}

}  // namespace detail

inline AffineFit fit_affine(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw DomainError("affine fit needs >= 2 samples");
    double sx = 0, sxx = 0, sy = 0, sxy = 0;
    const double n = double(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sxx += x[i] * x[i];
        sy += y[i];
        sxy += x[i] * y[i];
    }
    std::vector<double> c = detail::solve_dense({{n, sx}, {sx, sxx}}, {sy, sxy});
    AffineFit f{c[0], c[1], 1.0};
    std::vector<double> fitted(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) fitted[i] = f.c0 + f.c1 * x[i];
    f.r2 = detail::r_squared(y, fitted);
    return f;
}

inline QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 3)
        throw DomainError("quadratic fit needs >= 3 samples");
    double s1 = double(x.size()), sx = 0, sx2 = 0, sx3 = 0, sx4 = 0;
    double sy = 0, sxy = 0, sx2y = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i], x2 = xi * xi;
        sx += xi;
        sx2 += x2;
        sx3 += x2 * xi;
        sx4 += x2 * x2;
        sy += y[i];
        sxy += xi * y[i];
        sx2y += x2 * y[i];
    }
    std::vector<double> c = detail::solve_dense(
        {{s1, sx, sx2}, {sx, sx2, sx3}, {sx2, sx3, sx4}}, {sy, sxy, sx2y});
    QuadraticFit f{c[0], c[1], c[2], 1.0};
    std::vector<double> fitted(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
        fitted[i] = f.c0 + f.c1 * x[i] + f.c2 * x[i] * x[i];
    f.r2 = detail::r_squared(y, fitted);
    return f;
}

}  // namespace pcreg
