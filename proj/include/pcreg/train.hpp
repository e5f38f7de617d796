#pragma once

#include <cmath>
#include <cstddef>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "pcreg/estimator.hpp"
#include "pcreg/io.hpp"
#include "pcreg/model.hpp"

namespace pcreg {

// ============================================================================
// Gradient clipping and decoupled-weight-decay Adam
// ============================================================================

inline double global_norm(const std::vector<Tensor>& grads) {
    double s = 0.0;
    for (const Tensor& g : grads)
        for (double v : g.data()) s += v * v;
    return std::sqrt(s);
}

/// Scales all gradients so their joint norm is at most `max_norm`; returns the
/// factor applied (1 when no clipping happened).
inline double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    const double n = global_norm(grads);
    if (n <= max_norm || n == 0.0) return 1.0;
    const double f = max_norm / n;
    for (Tensor& g : grads)
        for (double& v : g.data()) v *= f;
    return f;
}

class AdamW {
  public:
    explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) {}

    void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr) {
        if (params.size() != grads.size()) throw ShapeMismatch("optimizer: one gradient per param");
        if (m_.empty()) {
            for (const Tensor* p : params) {
                m_.push_back(Tensor(p->rows(), p->cols()));
                v_.push_back(Tensor(p->rows(), p->cols()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols())
                throw ShapeMismatch("optimizer: gradient shape mismatch");
            for (std::size_t e = 0; e < p.size(); ++e) {
                const double g = grads[i][e];
                m_[i][e] = beta1_ * m_[i][e] + (1.0 - beta1_) * g;
                v_[i][e] = beta2_ * v_[i][e] + (1.0 - beta2_) * g * g;
                const double mhat = m_[i][e] / bc1;
                const double vhat = v_[i][e] / bc2;
                p[e] -= lr * (mhat / (std::sqrt(vhat) + eps_) + cfg_.weight_decay * p[e]);
            }
        }
    }

  private:
    OptimizerConfig cfg_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

// ============================================================================
// Supervision derived from ground truth (values only, computed once per pair)
// ============================================================================

struct PairSupervision {
    Tensor overlap;  // top-level patch-overlap ratios
    IndexPairs gt_pairs;
    std::vector<std::size_t> bg_src, bg_tgt;  // nodes without any positive pair
};

inline PairSupervision make_supervision(const Hierarchy& hs, const Hierarchy& ht,
                                        const RigidTransform& gt, const ModelConfig& cfg) {
    PairSupervision s;
    s.overlap = gt_overlap_matrix(hs, ht, gt, cfg.voxel_sizes[0]);
    std::vector<bool> src_hit(s.overlap.rows(), false), tgt_hit(s.overlap.cols(), false);
    for (std::size_t i = 0; i < s.overlap.rows(); ++i)
        for (std::size_t j = 0; j < s.overlap.cols(); ++j)
            if (s.overlap(i, j) >= cfg.overlap_positive) {
                s.gt_pairs.push_back({i, j});
                src_hit[i] = tgt_hit[j] = true;
            }
    for (std::size_t i = 0; i < src_hit.size(); ++i)
        if (!src_hit[i]) s.bg_src.push_back(i);
    for (std::size_t j = 0; j < tgt_hit.size(); ++j)
        if (!tgt_hit[j]) s.bg_tgt.push_back(j);
    return s;
}

// ============================================================================
// Full differentiable forward pass producing the eight loss terms
// ============================================================================

namespace detail {

inline PointCloud level_cloud(const HierarchyLevel& level) {
    PointCloud c;
    c.points = level.positions;
    return c;
}

}  // namespace detail

/// Computes every loss term for one supervised pair. The pose terms use the
/// closed-form solver on predicted values, so they contribute to the reported
/// total but not to gradients (the solver is not differentiated through).
template <typename T>
LossTermsT<T> pair_losses(const Hierarchy& hs, const Hierarchy& ht, const RigidTransform& gt,
                          const ModelParamsT<T>& mp, const ModelConfig& cfg,
                          const PairSupervision& sup) {
    std::vector<T> feats_s = encode_feature_stack(hs, mp.backbone);
    std::vector<T> feats_t = encode_feature_stack(ht, mp.backbone);
    EncodedPairT<T> enc = hybrid_encode(feats_s.back(), feats_t.back(),
                                        detail::level_cloud(hs.top()),
                                        detail::level_cloud(ht.top()), mp, cfg);

    LossTermsT<T> terms;
    terms.spot = loss_spot(enc.match_layers, sup.overlap, sup.gt_pairs);
    terms.coarse = loss_coarse(enc.match_layers.back(), sup.overlap, sup.gt_pairs, sup.bg_src,
                               sup.bg_tgt, enc.overlap_src, enc.overlap_tgt);

    std::vector<T> desc_s = descriptor_features(hs, feats_s, enc.src);
    std::vector<T> desc_t = descriptor_features(ht, feats_t, enc.tgt);
    KeypointSetT<T> ks = detect_keypoints(hs, desc_s, mp.keypoint, cfg.max_keypoints);
    KeypointSetT<T> kt = detect_keypoints(ht, desc_t, mp.keypoint, cfg.max_keypoints);
    T moved = transform_rows(ks.positions, gt);
    terms.keypoint = loss_keypoint(moved, ks.sigma, kt.positions, kt.sigma);

    KeypointMatchesT<T> km = match_keypoints(ks, kt, mp.keypoint_match, cfg.match_tau);
    terms.keycorr = loss_keycorr(ks.positions, km.predicted, gt);

    const Tensor& moved_v = value_of(moved);
    const Tensor& pred_v = value_of(km.predicted);
    const Tensor& tgt_pos_v = value_of(kt.positions);
    const double inlier_tau = 2.0 * cfg.voxel_sizes[0];
    Tensor labels(moved_v.rows(), 1);
    for (std::size_t i = 0; i < moved_v.rows(); ++i) {
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double d = moved_v(i, c) - pred_v(i, c);
            d2 += d * d;
        }
        labels(i, 0) = d2 <= inlier_tau * inlier_tau ? 1.0 : 0.0;
    }
    terms.inlier = loss_inlier(km.confidence, labels);

    // Contrastive descriptors: positive = nearest target keypoint under GT,
    // negatives = every target keypoint that is nobody's positive.
    const std::vector<std::size_t> nn = detail::nearest_rows(moved_v, tgt_pos_v);
    T positives = gather_rows(kt.descriptors, nn);
    std::set<std::size_t> used(nn.begin(), nn.end());
    std::vector<std::size_t> neg_idx;
    for (std::size_t j = 0; j < tgt_pos_v.rows(); ++j)
        if (!used.count(j)) neg_idx.push_back(j);
    T negatives = gather_rows(kt.descriptors, neg_idx);
    terms.infonce = loss_infonce(ks.descriptors, positives, negatives, mp.keypoint_match.bilinear);

    // Pose terms: closed-form estimate on values, evaluated as constants.
    CorrespondenceSet corr;
    for (std::size_t i = 0; i < pred_v.rows(); ++i) {
        Correspondence c;
        const Tensor& src_v = value_of(ks.positions);
        c.src = {src_v(i, 0), src_v(i, 1), src_v(i, 2)};
        c.tgt = {pred_v(i, 0), pred_v(i, 1), pred_v(i, 2)};
        c.weight = value_of(km.confidence)(i, 0);
        corr.push_back(c);
    }
    RigidTransform est;
    bool have_pose = false;
    try {
        est = weighted_svd(filter_consistency(corr, inlier_tau));
        have_pose = true;
    } catch (const DomainError&) {
        try {
            est = weighted_svd(corr);
            have_pose = true;
        } catch (const DomainError&) {
        }
    }
    if (have_pose) {
        Tensor r_hat(3, 3), t_hat(1, 3);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) r_hat(r, c) = est.rotation[r * 3 + c];
        for (int c = 0; c < 3; ++c) t_hat(0, c) = est.translation[c];
        auto [lr, lt] = loss_pose(lift<T>(std::move(r_hat)), lift<T>(std::move(t_hat)), gt);
        terms.pose_r = lr;
        terms.pose_t = lt;
    } else {
        terms.pose_r = lift<T>(Tensor(1, 1));
        terms.pose_t = lift<T>(Tensor(1, 1));
    }
    return terms;
}

// ============================================================================
// Toy training loop
// ============================================================================

struct TrainResult {
    ModelParams params;
    std::vector<double> trace;                      // weighted total per step
    std::vector<LossTermsT<double>> term_trace;     // unweighted terms per step
};

/// Mean of `count` trace entries starting at `begin` (the smoothing window for
/// convergence checks).
inline double smoothed_loss(const std::vector<double>& trace, std::size_t begin,
                            std::size_t count) {
    if (begin + count > trace.size()) throw DomainError("smoothing window out of range");
    if (count == 0) throw DomainError("smoothing window empty");
    double s = 0.0;
    for (std::size_t i = begin; i < begin + count; ++i) s += trace[i];
    return s / double(count);
}

/// Deterministic single-threaded training on synthetic pairs. One step = one
/// pair; an epoch is a full pass; the learning rate is multiplied by
/// `lr_decay` every `decay_every_epochs` epochs.
inline TrainResult train_toy(const std::vector<SynthPair>& dataset, const ModelConfig& cfg,
                             std::size_t steps) {
    if (dataset.empty()) throw EmptySet("training needs at least one pair");
    cfg.validate();

    struct Prepared {
        Hierarchy hs, ht;
        RigidTransform gt;
        PairSupervision sup;
    };
    std::vector<Prepared> prepared;
    prepared.reserve(dataset.size());
    for (const SynthPair& p : dataset) {
        Prepared pre{build_hierarchy(p.src, cfg.voxel_sizes),
                     build_hierarchy(p.tgt, cfg.voxel_sizes), p.gt, {}};
        pre.sup = make_supervision(pre.hs, pre.ht, p.gt, cfg);
        prepared.push_back(std::move(pre));
    }

    TrainResult result{init_model_params(cfg), {}};
    std::vector<Tensor*> slots;
    for (auto& [name, t] : named_params(result.params)) slots.push_back(t);

    AdamW opt(cfg.optimizer);
    const std::size_t steps_per_epoch = dataset.size();
    for (std::size_t step = 0; step < steps; ++step) {
        Prepared& pre = prepared[step % prepared.size()];

        std::vector<Var> flat;
        ModelParamsVar mv = lift_model_params(result.params, &flat);
        LossTermsVar terms = pair_losses(pre.hs, pre.ht, pre.gt, mv, cfg, pre.sup);
        Var total = loss_total(terms, cfg.loss_weights);
        const double loss_value = total.value().scalar();
        if (!std::isfinite(loss_value))
            throw DivergedLoss("loss became non-finite at step " + std::to_string(step));
        backward(total);

        std::vector<Tensor> grads;
        grads.reserve(flat.size());
        for (std::size_t i = 0; i < flat.size(); ++i)
            grads.push_back(flat[i].grad().empty()
                                ? Tensor(slots[i]->rows(), slots[i]->cols())
                                : flat[i].grad());
        clip_global_norm(grads, cfg.optimizer.clip_norm);

        const std::size_t epoch = step / steps_per_epoch;
        const double lr = cfg.optimizer.learning_rate *
                          std::pow(cfg.optimizer.lr_decay,
                                   double(epoch / cfg.optimizer.decay_every_epochs));
        opt.step(slots, grads, lr);
        result.trace.push_back(loss_value);
        result.term_trace.push_back({terms.keypoint.value().scalar(),
                                     terms.spot.value().scalar(),
                                     terms.coarse.value().scalar(),
                                     terms.infonce.value().scalar(),
                                     terms.keycorr.value().scalar(),
                                     terms.inlier.value().scalar(),
                                     terms.pose_t.value().scalar(),
                                     terms.pose_r.value().scalar()});
    }
    return result;
}

// ============================================================================
// Ablation harness
// ============================================================================

struct AblationRow {
    std::string axis;     // which knob was varied
    std::string setting;
    double final_loss;    // smoothed tail of the training trace
};

/// Short training runs across the architecture variants and across the
/// serialization curves with the order-indicator token on and off. Results
/// are reported for comparison; desk-scale runs are too small to rank them
/// reliably.
inline std::vector<AblationRow> run_ablations(const std::vector<SynthPair>& dataset,
                                              const ModelConfig& base, std::size_t steps) {
    std::vector<AblationRow> rows;
    auto run = [&](const std::string& axis, const std::string& setting, const ModelConfig& cfg) {
        TrainResult tr = train_toy(dataset, cfg, steps);
        const std::size_t w = std::min<std::size_t>(20, tr.trace.size());
        rows.push_back({axis, setting, smoothed_loss(tr.trace, tr.trace.size() - w, w)});
    };
    for (Variant v : {Variant::hybrid, Variant::mamba_only, Variant::transformer_only}) {
        ModelConfig cfg = base;
        cfg.variant = v;
        run("variant", variant_name(v), cfg);
    }
    for (Curve c : {Curve::zorder, Curve::hilbert, Curve::xyz})
        for (bool indicator : {false, true}) {
            ModelConfig cfg = base;
            cfg.variant = Variant::hybrid;
            cfg.curve = c;
            cfg.order_indicator = indicator;
            run("serialization",
                std::string(curve_name(c)) + (indicator ? "+indicator" : ""), cfg);
        }
    return rows;
}

inline void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
    out << "axis,setting,final_loss\n";
    for (const AblationRow& r : rows)
        out << r.axis << ',' << r.setting << ',' << r.final_loss << '\n';
}

}  // namespace pcreg
