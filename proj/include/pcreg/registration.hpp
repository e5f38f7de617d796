#pragma once

#include <chrono>
#include <string>
#include <vector>

#include <json.hpp>

#include "pcreg/estimator.hpp"
#include "pcreg/io.hpp"
#include "pcreg/model.hpp"

namespace pcreg {

// ============================================================================
// Diagnostics
// ============================================================================

struct StageTiming {
    std::string stage;
    double ms = 0.0;
};

struct RegistrationDiagnostics {
    std::vector<StageTiming> timings;
    std::size_t src_points = 0, tgt_points = 0;
    std::size_t coarse_nodes_src = 0, coarse_nodes_tgt = 0, coarse_pairs = 0;
    std::size_t keypoints_src = 0, keypoints_tgt = 0;
    std::size_t candidate_pairs = 0, filtered_pairs = 0, fine_pairs = 0;
    double inlier_ratio = 0.0;  // filtered / candidate
};

struct RegistrationResult {
    RigidTransform transform;  // final estimate
    RigidTransform initial;    // sparse-stage estimate
    RegistrationDiagnostics diagnostics;
};

inline void to_json(nlohmann::json& j, const RegistrationDiagnostics& d) {
    nlohmann::json timings = nlohmann::json::array();
    for (const StageTiming& t : d.timings) timings.push_back({{"stage", t.stage}, {"ms", t.ms}});
    j = {{"timings", timings},
         {"src_points", d.src_points},
         {"tgt_points", d.tgt_points},
         {"coarse_nodes_src", d.coarse_nodes_src},
         {"coarse_nodes_tgt", d.coarse_nodes_tgt},
         {"coarse_pairs", d.coarse_pairs},
         {"keypoints_src", d.keypoints_src},
         {"keypoints_tgt", d.keypoints_tgt},
         {"candidate_pairs", d.candidate_pairs},
         {"filtered_pairs", d.filtered_pairs},
         {"fine_pairs", d.fine_pairs},
         {"inlier_ratio", d.inlier_ratio}};
}

inline nlohmann::json registration_json(const RegistrationResult& r) {
    nlohmann::json j;
    j["rotation"] = std::vector<double>(r.transform.rotation.begin(), r.transform.rotation.end());
    j["translation"] = std::vector<double>(r.transform.translation.begin(),
                                           r.transform.translation.end());
    j["diagnostics"] = r.diagnostics;
    return j;
}

// ============================================================================
// Four-stage registration
// ============================================================================

namespace detail {

class StageClock {
  public:
    explicit StageClock(std::vector<StageTiming>& out) : out_(out) {}
    template <typename F>
    auto run(const std::string& stage, F&& f) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            record(stage, t0);
        } else {
            auto r = f();
            record(stage, t0);
            return r;
        }
    }

  private:
    void record(const std::string& stage, std::chrono::steady_clock::time_point t0) {
        const auto dt = std::chrono::steady_clock::now() - t0;
        out_.push_back({stage, std::chrono::duration<double, std::milli>(dt).count()});
    }
    std::vector<StageTiming>& out_;
};

/// Sparse correspondences in oracle mode: descriptors are ground-truth-frame
/// coordinates, so matching reduces to nearest neighbors with a Gaussian
/// distance weight. Isolates pipeline plumbing from learning quality.
inline CorrespondenceSet oracle_keypoint_matches(const Tensor& src_pos, const Tensor& tgt_pos,
                                                 const RigidTransform& gt, double voxel) {
    const double gate = 2.0 * voxel;        // same-region keypoints lie within this
    const double band = 0.5 * voxel;        // weight bandwidth
    CorrespondenceSet out;
    for (std::size_t i = 0; i < src_pos.rows(); ++i) {
        const Vec3 x{src_pos(i, 0), src_pos(i, 1), src_pos(i, 2)};
        const Vec3 moved = gt.apply(x);
        double best = 1e300;
        std::size_t arg = 0;
        for (std::size_t j = 0; j < tgt_pos.rows(); ++j) {
            const Vec3 y{tgt_pos(j, 0), tgt_pos(j, 1), tgt_pos(j, 2)};
            const double d2 = sq_dist(moved, y);
            if (d2 < best) {
                best = d2;
                arg = j;
            }
        }
        if (best > gate * gate) continue;
        Correspondence c;
        c.src = x;
        c.tgt = {tgt_pos(arg, 0), tgt_pos(arg, 1), tgt_pos(arg, 2)};
        c.weight = std::exp(-best / (2.0 * band * band));
        out.push_back(c);
    }
    return out;
}

}  // namespace detail

/// backbone -> serialize -> hybrid encoder -> coarse match -> keypoints ->
/// consistency filter -> weighted SVD (initial) -> fine correspondences ->
/// weighted SVD (final). With `oracle_gt` set, descriptors are replaced by
/// ground-truth-frame coordinates (test harness isolating the plumbing).
inline RegistrationResult register_pair(const PointCloud& src, const PointCloud& tgt,
                                        const ModelParams& params, const ModelConfig& cfg,
                                        const RigidTransform* oracle_gt = nullptr) {
    cfg.validate();
    if (src.size() < cfg.min_points || tgt.size() < cfg.min_points)
        throw TooFewPoints("registration needs at least " + std::to_string(cfg.min_points) +
                           " points per cloud");

    RegistrationResult result;
    RegistrationDiagnostics& diag = result.diagnostics;
    diag.src_points = src.size();
    diag.tgt_points = tgt.size();
    detail::StageClock clock(diag.timings);

    Hierarchy hs, ht;
    clock.run("hierarchy", [&] {
        hs = build_hierarchy(src, cfg.voxel_sizes);
        ht = build_hierarchy(tgt, cfg.voxel_sizes);
    });
    diag.coarse_nodes_src = hs.top().positions.size();
    diag.coarse_nodes_tgt = ht.top().positions.size();

    std::vector<Tensor> feats_s, feats_t;
    clock.run("features", [&] {
        feats_s = encode_feature_stack(hs, params.backbone);
        feats_t = encode_feature_stack(ht, params.backbone);
        for (std::size_t l = 0; l < hs.depth(); ++l) hs.levels[l].features = feats_s[l];
        for (std::size_t l = 0; l < ht.depth(); ++l) ht.levels[l].features = feats_t[l];
    });

    EncodedPair enc = clock.run("encoder", [&] {
        return hybrid_encode(feats_s.back(), feats_t.back(),
                             PointCloud{hs.top().positions, {}},
                             PointCloud{ht.top().positions, {}}, params, cfg);
    });
    diag.coarse_pairs = extract_coarse_pairs(enc.match_layers.back(), cfg.coarse_top_k).size();

    KeypointSet ks, kt;
    clock.run("keypoints", [&] {
        std::vector<Tensor> desc_s = descriptor_features(hs, feats_s, enc.src);
        std::vector<Tensor> desc_t = descriptor_features(ht, feats_t, enc.tgt);
        ks = detect_keypoints(hs, desc_s, params.keypoint, cfg.max_keypoints);
        kt = detect_keypoints(ht, desc_t, params.keypoint, cfg.max_keypoints);
    });
    diag.keypoints_src = ks.positions.rows();
    diag.keypoints_tgt = kt.positions.rows();

    const std::size_t sd = cfg.depth() - 2;
    const double semi_voxel = cfg.voxel_sizes[sd - 1];
    CorrespondenceSet candidates = clock.run("match", [&]() -> CorrespondenceSet {
        if (oracle_gt)
            return detail::oracle_keypoint_matches(ks.positions, kt.positions, *oracle_gt,
                                                   semi_voxel);
        KeypointMatches km = match_keypoints(ks, kt, params.keypoint_match, cfg.match_tau);
        CorrespondenceSet out;
        for (std::size_t i = 0; i < km.predicted.rows(); ++i) {
            Correspondence c;
            c.src = {ks.positions(i, 0), ks.positions(i, 1), ks.positions(i, 2)};
            c.tgt = {km.predicted(i, 0), km.predicted(i, 1), km.predicted(i, 2)};
            c.weight = km.confidence(i, 0);
            out.push_back(c);
        }
        return out;
    });
    diag.candidate_pairs = candidates.size();

    const double tau_d = 2.0 * cfg.voxel_sizes[0];
    CorrespondenceSet filtered = clock.run("filter", [&]() -> CorrespondenceSet {
        if (candidates.size() < 3)
            throw NoOverlap("only " + std::to_string(candidates.size()) +
                            " sparse correspondences");
        try {
            CorrespondenceSet kept = filter_consistency(candidates, tau_d);
            for (Correspondence& c : kept) c.weight *= c.score;
            return kept;
        } catch (const TooFewCorrespondences&) {
            throw NoOverlap("consistency voting impossible");
        }
    });
    diag.filtered_pairs = filtered.size();
    diag.inlier_ratio = double(filtered.size()) / double(candidates.size());
    if (filtered.size() < 3)
        throw NoOverlap("only " + std::to_string(filtered.size()) +
                        " consistent correspondences");

    result.initial = clock.run("initial", [&] { return weighted_svd(filtered); });

    if (oracle_gt) {
        // Pure proximity attention at the fine stage: zeroed descriptors make
        // the logits depend on distance alone.
        hs.levels[1].features = Tensor(hs.levels[1].positions.size(), 1);
        ht.levels[1].features = Tensor(ht.levels[1].positions.size(), 1);
    }
    const double fine_radius = std::max(cfg.fine_radius, cfg.voxel_sizes[0]);
    CorrespondenceSet fine = clock.run("fine", [&] {
        return fine_correspondences(hs, ht, result.initial, fine_radius, cfg.match_tau);
    });
    diag.fine_pairs = fine.size();

    result.transform = clock.run("final", [&] { return weighted_svd(fine); });
    return result;
}

// ============================================================================
// Dataset evaluation
// ============================================================================

struct EvalSummary {
    double mean_rre_deg = 0.0;  // over successfully registered pairs
    double mean_rte = 0.0;
    double recall = 0.0;
    std::size_t pairs = 0;
    std::size_t failures = 0;  // NoOverlap / degenerate outcomes
};

inline EvalSummary evaluate_pairs(const std::vector<SynthPair>& dataset, const ModelParams& params,
                                  const ModelConfig& cfg, bool oracle,
                                  double rot_thresh_deg = 5.0, double trans_thresh = 0.1) {
    if (dataset.empty()) throw EmptySet("evaluation needs at least one pair");
    EvalSummary s;
    s.pairs = dataset.size();
    std::vector<RegistrationMetrics> metrics;
    for (const SynthPair& p : dataset) {
        try {
            RegistrationResult r =
                register_pair(p.src, p.tgt, params, cfg, oracle ? &p.gt : nullptr);
            metrics.push_back(
                evaluate_transform(r.transform, p.gt, rot_thresh_deg, trans_thresh));
        } catch (const DomainError&) {
            ++s.failures;
            RegistrationMetrics failed;
            failed.success = false;
            failed.rre_deg = 180.0;
            failed.rte = 1e9;
            metrics.push_back(failed);
        }
    }
    s.recall = registration_recall(metrics);
    double rre = 0.0, rte_sum = 0.0;
    std::size_t ok = 0;
    for (const RegistrationMetrics& m : metrics)
        if (m.success) {
            rre += m.rre_deg;
            rte_sum += m.rte;
            ++ok;
        }
    if (ok > 0) {
        s.mean_rre_deg = rre / double(ok);
        s.mean_rte = rte_sum / double(ok);
    }
    return s;
}

}  // namespace pcreg
