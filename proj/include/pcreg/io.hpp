#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "pcreg/geom.hpp"
#include "pcreg/rng.hpp"

namespace pcreg {

// ============================================================================
// XYZ text format: one point per line, three reals, '#' starts a comment
// ============================================================================

namespace detail {

inline std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream ss(line);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

inline double parse_real(const std::string& tok, long line_no) {
    const char* begin = tok.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end != begin + tok.size()) throw ParseError("not a number: '" + tok + "'", line_no);
    if (!std::isfinite(v)) throw ParseError("non-finite coordinate: '" + tok + "'", line_no);
    return v;
}

}  // namespace detail

inline PointCloud read_xyz(std::istream& in) {
    PointCloud cloud;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        if (toks.size() != 3)
            throw ParseError("expected 3 coordinates, got " + std::to_string(toks.size()),
                             line_no);
        cloud.points.push_back(Vec3{detail::parse_real(toks[0], line_no),
                                    detail::parse_real(toks[1], line_no),
                                    detail::parse_real(toks[2], line_no)});
    }
    if (cloud.points.empty()) throw EmptyCloud();
    return cloud;
}

inline PointCloud read_xyz_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DomainError("cannot open file: " + path);
    return read_xyz(in);
}

inline void write_xyz(std::ostream& out, const PointCloud& cloud) {
    out << std::setprecision(17);
    for (const Vec3& p : cloud.points) out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

inline void write_xyz_file(const std::string& path, const PointCloud& cloud) {
    std::ofstream out(path);
    if (!out) throw DomainError("cannot open file for writing: " + path);
    write_xyz(out, cloud);
}

// ============================================================================
// ASCII PLY subset: exactly one vertex element with float/double x y z
// ============================================================================

inline PointCloud read_ply(std::istream& in) {
    std::string line;
    long line_no = 0;

    auto next_line = [&](bool required) -> bool {
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            return true;
        }
        if (required) throw ParseError("unexpected end of file", line_no);
        return false;
    };

    next_line(true);
    if (line != "ply") throw ParseError("missing 'ply' magic", line_no);

    bool have_format = false;
    long vertex_count = -1;
    std::vector<std::string> properties;
    bool in_vertex_element = false;
    while (true) {
        next_line(true);
        const auto toks = detail::split_ws(line);
        if (toks.empty()) continue;
        if (toks[0] == "comment") continue;
        if (toks[0] == "format") {
            if (toks.size() < 2) throw ParseError("malformed format line", line_no);
            if (toks[1] != "ascii")
                throw UnsupportedPlyFeature("only ascii format is supported, got " + toks[1]);
            have_format = true;
        } else if (toks[0] == "element") {
            if (toks.size() != 3) throw ParseError("malformed element line", line_no);
            if (toks[1] != "vertex")
                throw UnsupportedPlyFeature("unsupported element: " + toks[1]);
            if (vertex_count >= 0) throw ParseError("duplicate vertex element", line_no);
            vertex_count = std::strtol(toks[2].c_str(), nullptr, 10);
            if (vertex_count < 0) throw ParseError("negative vertex count", line_no);
            in_vertex_element = true;
        } else if (toks[0] == "property") {
            if (!in_vertex_element) throw ParseError("property before element", line_no);
            if (toks.size() > 1 && toks[1] == "list") throw UnsupportedPlyFeature("list properties");
            if (toks.size() != 3) throw ParseError("malformed property line", line_no);
            if (toks[1] != "float" && toks[1] != "float32" && toks[1] != "double" &&
                toks[1] != "float64")
                throw UnsupportedPlyFeature("property type " + toks[1]);
            properties.push_back(toks[2]);
        } else if (toks[0] == "end_header") {
            break;
        } else {
            throw ParseError("unrecognized header line: " + toks[0], line_no);
        }
    }
    if (!have_format) throw ParseError("header missing format line", line_no);
    if (vertex_count < 0) throw ParseError("header missing vertex element", line_no);
    if (properties != std::vector<std::string>{"x", "y", "z"})
        throw UnsupportedPlyFeature("vertex properties must be exactly x y z");

    PointCloud cloud;
    cloud.points.reserve(std::size_t(vertex_count));
    for (long i = 0; i < vertex_count; ++i) {
        do {
            next_line(true);
        } while (detail::split_ws(line).empty());
        const auto toks = detail::split_ws(line);
        if (toks.size() != 3)
            throw ParseError("expected 3 coordinates, got " + std::to_string(toks.size()),
                             line_no);
        cloud.points.push_back(Vec3{detail::parse_real(toks[0], line_no),
                                    detail::parse_real(toks[1], line_no),
                                    detail::parse_real(toks[2], line_no)});
    }
    if (cloud.points.empty()) throw EmptyCloud();
    return cloud;
}

inline PointCloud read_ply_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DomainError("cannot open file: " + path);
    return read_ply(in);
}

inline void write_ply(std::ostream& out, const PointCloud& cloud) {
    out << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.size()
        << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
    out << std::setprecision(17);
    for (const Vec3& p : cloud.points) out << p[0] << ' ' << p[1] << ' ' << p[2] << '\n';
}

inline void write_ply_file(const std::string& path, const PointCloud& cloud) {
    std::ofstream out(path);
    if (!out) throw DomainError("cannot open file for writing: " + path);
    write_ply(out, cloud);
}

/// Reads by extension: ".ply" via the PLY parser, anything else as XYZ text.
inline PointCloud read_cloud_file(const std::string& path) {
    if (path.size() >= 4 && path.substr(path.size() - 4) == ".ply") return read_ply_file(path);
    return read_xyz_file(path);
}

// ============================================================================
// Synthetic registration pairs with ground truth
// ============================================================================

struct SynthConfig {
    std::size_t n_points = 1000;   // nominal points per view
    double overlap_fraction = 0.5; // requested measured overlap, (0,1]
    double rot_max_deg = 45.0;
    double trans_max = 0.5;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
};

struct SynthPair {
    PointCloud src, tgt;
    RigidTransform gt;  // aligns src onto tgt
    double measured_overlap = 0.0;
};

/// Fraction of points in `a` that have a neighbor in `b` within `radius`.
inline double overlap_between(const std::vector<Vec3>& a, const std::vector<Vec3>& b,
                              double radius) {
    if (a.empty() || b.empty()) throw EmptyCloud();
    const double r2 = radius * radius;
    std::size_t hit = 0;
    for (const Vec3& p : a) {
        for (const Vec3& q : b) {
            if (sq_dist(p, q) <= r2) {
                ++hit;
                break;
            }
        }
    }
    return double(hit) / double(a.size());
}

/// Default measurement radius: twice the median nearest-neighbor spacing of
/// the reference cloud.
inline double overlap_radius(const std::vector<Vec3>& reference) {
    return 2.0 * median_nn_spacing(reference);
}

namespace detail {

/// Structured scene: a few planar patches, a couple of spherical shells, and
/// uniform clutter, spanning roughly 2 scene units.
inline std::vector<Vec3> synth_base_cloud(Rng& rng, std::size_t n) {
    struct Plane {
        Vec3 c, u, v;
    };
    std::vector<Plane> planes;
    for (int i = 0; i < 3; ++i) {
        const Vec3 normal = random_unit_vector(rng);
        Vec3 u = cross(normal, Vec3{1, 0, 0});
        if (norm(u) < 1e-6) u = cross(normal, Vec3{0, 1, 0});
        u = scale(u, 1.0 / norm(u));
        const Vec3 v = cross(normal, u);
        const Vec3 c{rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0,
                     rng.uniform() * 2.0 - 1.0};
        planes.push_back({c, u, v});
    }
    struct Sphere {
        Vec3 c;
        double r;
    };
    std::vector<Sphere> spheres;
    for (int i = 0; i < 2; ++i)
        spheres.push_back({Vec3{rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0,
                                rng.uniform() * 2.0 - 1.0},
                           0.2 + 0.2 * rng.uniform()});

    std::vector<Vec3> pts;
    pts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double pick = rng.uniform();
        if (pick < 0.5) {
            const Plane& pl = planes[rng.uniform_index(planes.size())];
            const double a = (rng.uniform() * 2.0 - 1.0) * 0.8;
            const double b = (rng.uniform() * 2.0 - 1.0) * 0.8;
            pts.push_back(add(pl.c, add(scale(pl.u, a), scale(pl.v, b))));
        } else if (pick < 0.8) {
            const Sphere& sp = spheres[rng.uniform_index(spheres.size())];
            pts.push_back(add(sp.c, scale(random_unit_vector(rng), sp.r)));
        } else {
            pts.push_back(Vec3{rng.uniform() * 2.0 - 1.0, rng.uniform() * 2.0 - 1.0,
                               rng.uniform() * 2.0 - 1.0});
        }
    }
    return pts;
}

inline void shuffle_points(Rng& rng, std::vector<Vec3>& pts) {
    for (std::size_t i = pts.size(); i > 1; --i) std::swap(pts[i - 1], pts[rng.uniform_index(i)]);
}

}  // namespace detail

/// Crops two slab views of a structured scene along a random direction,
/// bisecting the per-view keep fraction until the neighbor-criterion overlap
/// lands within ±5% of the request, then misaligns the source view by a
/// random rigid transform and perturbs it with Gaussian noise. The returned
/// ground truth maps the source onto the target.
inline SynthPair synth_pair(const SynthConfig& cfg) {
    if (cfg.n_points == 0) throw EmptyCloud();
    if (!(cfg.overlap_fraction > 0.0) || cfg.overlap_fraction > 1.0)
        throw InfeasibleOverlap("overlap fraction must be in (0, 1], got " +
                                std::to_string(cfg.overlap_fraction));
    const double f = cfg.overlap_fraction;

    Rng rng(cfg.seed);
    // Per-view keep fraction v yields nominal shared fraction (2v-1)/v.
    const double v0 = 1.0 / (2.0 - f);
    const std::size_t n_base = std::size_t(std::ceil(double(cfg.n_points) / v0));
    const std::vector<Vec3> base = detail::synth_base_cloud(rng, n_base);

    const Vec3 axis = random_unit_vector(rng);
    std::vector<std::size_t> order(base.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double pa = dot(base[a], axis), pb = dot(base[b], axis);
        if (pa != pb) return pa < pb;
        return a < b;
    });

    auto crop = [&](double v, std::vector<Vec3>& a, std::vector<Vec3>& b) {
        const std::size_t k =
            std::min(base.size(), std::max<std::size_t>(1, std::size_t(std::lround(v * double(base.size())))));
        a.clear();
        b.clear();
        for (std::size_t i = 0; i < k; ++i) a.push_back(base[order[i]]);
        for (std::size_t i = base.size() - k; i < base.size(); ++i) b.push_back(base[order[i]]);
    };

    std::vector<Vec3> view_a, view_b;
    double lo = 0.3, hi = 1.0, v = v0;
    double measured = -1.0;
    bool ok = false;
    for (int iter = 0; iter < 40; ++iter) {
        crop(v, view_a, view_b);
        measured = overlap_between(view_a, view_b, overlap_radius(view_b));
        if (std::abs(measured - f) <= 0.05 * f) {
            ok = true;
            break;
        }
        if (measured < f)
            lo = v;
        else
            hi = v;
        v = 0.5 * (lo + hi);
        if (hi - lo < 1e-12) break;
    }
    if (!ok)
        throw InfeasibleOverlap("could not reach overlap " + std::to_string(f) +
                                "; closest achieved " + std::to_string(measured));

    const RigidTransform misalign = random_transform(rng, cfg.rot_max_deg, cfg.trans_max);

    SynthPair out;
    out.measured_overlap = measured;
    out.gt = invert(misalign);
    out.tgt.points = std::move(view_b);
    out.src.points.reserve(view_a.size());
    for (const Vec3& p : view_a) {
        Vec3 q = add(matvec(misalign.rotation, p), misalign.translation);
        if (cfg.noise_sigma > 0.0)
            q = add(q, Vec3{rng.normal() * cfg.noise_sigma, rng.normal() * cfg.noise_sigma,
                            rng.normal() * cfg.noise_sigma});
        out.src.points.push_back(q);
    }
    detail::shuffle_points(rng, out.src.points);
    detail::shuffle_points(rng, out.tgt.points);
    return out;
}

/// Named regimes mirroring common high- and low-overlap benchmark settings.
inline SynthConfig synth_preset(const std::string& name, std::size_t n_points,
                                std::uint64_t seed) {
    SynthConfig cfg;
    cfg.n_points = n_points;
    cfg.seed = seed;
    cfg.rot_max_deg = 45.0;
    cfg.trans_max = 0.5;
    cfg.noise_sigma = 0.005;
    if (name == "highoverlap")
        cfg.overlap_fraction = 0.5;
    else if (name == "lowoverlap")
        cfg.overlap_fraction = 0.2;
    else
        throw DomainError("unknown synthetic preset: " + name);
    return cfg;
}

}  // namespace pcreg
