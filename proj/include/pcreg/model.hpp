#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "pcreg/attention.hpp"
#include "pcreg/backbone.hpp"
#include "pcreg/losses.hpp"
#include "pcreg/matching.hpp"
#include "pcreg/serialize.hpp"
#include "pcreg/ssm.hpp"

namespace pcreg {

// ============================================================================
// Configuration
// ============================================================================

enum class Variant { hybrid, mamba_only, transformer_only };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::hybrid: return "hybrid";
        case Variant::mamba_only: return "mamba_only";
        case Variant::transformer_only: return "transformer_only";
    }
    return "?";
}

inline Variant variant_from_name(const std::string& s) {
    if (s == "hybrid") return Variant::hybrid;
    if (s == "mamba_only") return Variant::mamba_only;
    if (s == "transformer_only") return Variant::transformer_only;
    throw DomainError("unknown variant '" + s + "'");
}

struct OptimizerConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    double clip_norm = 0.5;
    double lr_decay = 0.9;                // multiplied in every `decay_every_epochs`
    std::size_t decay_every_epochs = 5;
};

/// Full model description. The JSON schema mirrors the field names; every
/// field is optional and falls back to the default shown here.
struct ModelConfig {
    std::vector<double> voxel_sizes{0.1, 0.2, 0.4};  // ascending; depth = size + 1
    std::vector<std::size_t> widths{8, 8, 8, 8};     // feature width per level
    std::size_t encoder_blocks = 1;                  // hybrid repetitions
    std::size_t ssm_state = 4;
    std::size_t ssm_expand = 2;
    Curve curve = Curve::zorder;
    int code_depth = 16;                             // quantization bits per axis
    bool order_indicator = false;
    bool concat_coordinates = true;  // append normalized coordinates to top features
    Variant variant = Variant::hybrid;
    double match_tau = 0.1;
    std::size_t coarse_top_k = 3;
    std::size_t max_keypoints = 512;
    std::size_t min_points = 100;
    double fine_radius = 0.05;
    double overlap_positive = 0.1;  // patch-overlap ratio counting as supervision
    LossWeights loss_weights;
    OptimizerConfig optimizer;
    std::uint64_t seed = 1;

    std::size_t depth() const { return voxel_sizes.size() + 1; }
    /// Width the hybrid encoder and overlap head operate at.
    std::size_t encoder_width() const {
        return widths.back() + (concat_coordinates ? 3 : 0);
    }

    void validate() const {
        if (voxel_sizes.empty()) throw DomainError("config: at least one voxel size");
        if (widths.size() != depth())
            throw DomainError("config: one feature width per hierarchy level");
        for (std::size_t w : widths)
            if (w == 0) throw DomainError("config: widths must be positive");
        // The dense feature is the pre-pool output of the first transition, so
        // the two finest levels share a width.
        if (widths[0] != widths[1])
            throw DomainError("config: dense and fine widths must match");
        if (encoder_blocks == 0) throw DomainError("config: at least one encoder block");
        if (ssm_state == 0 || ssm_expand == 0) throw DomainError("config: ssm sizes positive");
        if (code_depth < 1 || code_depth > 20) throw DomainError("config: code depth in [1,20]");
        if (match_tau <= 0.0) throw DomainError("config: match temperature positive");
        if (fine_radius <= 0.0) throw DomainError("config: fine radius positive");
    }

    /// Small everything: suitable for the synthetic training exercises.
    static ModelConfig toy() {
        ModelConfig c;
        c.voxel_sizes = {0.3, 0.9};
        c.widths = {6, 6, 6};
        c.min_points = 20;
        c.max_keypoints = 64;
        c.fine_radius = 0.3;
        c.optimizer.learning_rate = 2e-3;  // the reference rate is far too slow
                                           // for a few hundred desk-scale steps
        return c;
    }
};

inline void to_json(nlohmann::json& j, const OptimizerConfig& o) {
    j = {{"learning_rate", o.learning_rate}, {"weight_decay", o.weight_decay},
         {"clip_norm", o.clip_norm},         {"lr_decay", o.lr_decay},
         {"decay_every_epochs", o.decay_every_epochs}};
}

inline void from_json(const nlohmann::json& j, OptimizerConfig& o) {
    o.learning_rate = j.value("learning_rate", o.learning_rate);
    o.weight_decay = j.value("weight_decay", o.weight_decay);
    o.clip_norm = j.value("clip_norm", o.clip_norm);
    o.lr_decay = j.value("lr_decay", o.lr_decay);
    o.decay_every_epochs = j.value("decay_every_epochs", o.decay_every_epochs);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = {{"spot", w.lambda_s},        {"coarse", w.lambda_c}, {"infonce", w.lambda_f},
         {"keycorr", w.lambda_k},     {"inlier", w.lambda_i}, {"translation", w.lambda_t},
         {"rotation", w.lambda_r}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
    w.lambda_s = j.value("spot", w.lambda_s);
    w.lambda_c = j.value("coarse", w.lambda_c);
    w.lambda_f = j.value("infonce", w.lambda_f);
    w.lambda_k = j.value("keycorr", w.lambda_k);
    w.lambda_i = j.value("inlier", w.lambda_i);
    w.lambda_t = j.value("translation", w.lambda_t);
    w.lambda_r = j.value("rotation", w.lambda_r);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"voxel_sizes", c.voxel_sizes},
         {"widths", c.widths},
         {"encoder_blocks", c.encoder_blocks},
         {"ssm_state", c.ssm_state},
         {"ssm_expand", c.ssm_expand},
         {"curve", curve_name(c.curve)},
         {"code_depth", c.code_depth},
         {"order_indicator", c.order_indicator},
         {"concat_coordinates", c.concat_coordinates},
         {"variant", variant_name(c.variant)},
         {"match_tau", c.match_tau},
         {"coarse_top_k", c.coarse_top_k},
         {"max_keypoints", c.max_keypoints},
         {"min_points", c.min_points},
         {"fine_radius", c.fine_radius},
         {"overlap_positive", c.overlap_positive},
         {"loss_weights", c.loss_weights},
         {"optimizer", c.optimizer},
         {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.voxel_sizes = j.value("voxel_sizes", c.voxel_sizes);
    c.widths = j.value("widths", c.widths);
    c.encoder_blocks = j.value("encoder_blocks", c.encoder_blocks);
    c.ssm_state = j.value("ssm_state", c.ssm_state);
    c.ssm_expand = j.value("ssm_expand", c.ssm_expand);
    if (j.contains("curve")) c.curve = curve_from_name(j.at("curve").get<std::string>());
    c.code_depth = j.value("code_depth", c.code_depth);
    c.order_indicator = j.value("order_indicator", c.order_indicator);
    c.concat_coordinates = j.value("concat_coordinates", c.concat_coordinates);
    if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.match_tau = j.value("match_tau", c.match_tau);
    c.coarse_top_k = j.value("coarse_top_k", c.coarse_top_k);
    c.max_keypoints = j.value("max_keypoints", c.max_keypoints);
    c.min_points = j.value("min_points", c.min_points);
    c.fine_radius = j.value("fine_radius", c.fine_radius);
    c.overlap_positive = j.value("overlap_positive", c.overlap_positive);
    if (j.contains("loss_weights")) j.at("loss_weights").get_to(c.loss_weights);
    if (j.contains("optimizer")) j.at("optimizer").get_to(c.optimizer);
    c.seed = j.value("seed", c.seed);
}

inline ModelConfig load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DomainError("cannot open config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("config: ") + e.what(), 0);
    }
    ModelConfig c = j.get<ModelConfig>();
    c.validate();
    return c;
}

// ============================================================================
// Parameters
// ============================================================================

template <typename T>
struct EncoderBlockParamsT {
    MambaParamsT<T> mamba;
    AttentionParamsT<T> self_attn;
    AttentionParamsT<T> cross_attn;
};

template <typename T>
struct ModelParamsT {
    BackboneParamsT<T> backbone;
    std::vector<EncoderBlockParamsT<T>> blocks;
    KeypointParamsT<T> keypoint;
    KeypointMatchParamsT<T> keypoint_match;
    T overlap_w;  // (1, encoder width): per-node overlap logit head
    T overlap_b;  // (1,1)
};

using ModelParams = ModelParamsT<Tensor>;
using ModelParamsVar = ModelParamsT<Var>;

namespace detail {

/// Walks every parameter tensor in a fixed order. Lifting, optimization, and
/// serialization all share this traversal so slot i always means the same
/// tensor.
template <typename T, typename F>
void visit_params(ModelParamsT<T>& p, F&& f) {
    auto mlp = [&](const std::string& base, MlpParamsT<T>& m) {
        f(base + ".w1", m.w1);
        f(base + ".b1", m.b1);
        f(base + ".w2", m.w2);
        f(base + ".b2", m.b2);
    };
    for (std::size_t i = 0; i < p.backbone.up.size(); ++i)
        mlp("backbone.up" + std::to_string(i), p.backbone.up[i]);
    for (std::size_t i = 0; i < p.backbone.skip.size(); ++i)
        mlp("backbone.skip" + std::to_string(i), p.backbone.skip[i]);
    for (std::size_t b = 0; b < p.blocks.size(); ++b) {
        const std::string eb = "encoder" + std::to_string(b);
        MambaParamsT<T>& m = p.blocks[b].mamba;
        f(eb + ".mamba.ln_gain", m.ln_gain);
        f(eb + ".mamba.ln_bias", m.ln_bias);
        f(eb + ".mamba.w_in", m.w_in);
        f(eb + ".mamba.b_in", m.b_in);
        f(eb + ".mamba.conv_kernel", m.conv_kernel);
        f(eb + ".mamba.w_gate", m.w_gate);
        f(eb + ".mamba.b_gate", m.b_gate);
        f(eb + ".mamba.ssm.a_diag", m.ssm.a_diag);
        f(eb + ".mamba.ssm.d_skip", m.ssm.d_skip);
        f(eb + ".mamba.ssm.w_delta", m.ssm.w_delta);
        f(eb + ".mamba.ssm.b_delta", m.ssm.b_delta);
        f(eb + ".mamba.ssm.w_b", m.ssm.w_b);
        f(eb + ".mamba.ssm.b0", m.ssm.b0);
        f(eb + ".mamba.ssm.w_c", m.ssm.w_c);
        f(eb + ".mamba.ssm.c0", m.ssm.c0);
        f(eb + ".mamba.w_out", m.w_out);
        f(eb + ".mamba.b_out", m.b_out);
        f(eb + ".mamba.order_token", m.order_token);
        for (auto [tag, a] : {std::pair<const char*, AttentionParamsT<T>*>{".self", &p.blocks[b].self_attn},
                              {".cross", &p.blocks[b].cross_attn}}) {
            const std::string ab = eb + tag;
            f(ab + ".ln1_gain", a->ln1_gain);
            f(ab + ".ln1_bias", a->ln1_bias);
            f(ab + ".wq", a->wq);
            f(ab + ".wk", a->wk);
            f(ab + ".wv", a->wv);
            f(ab + ".wo", a->wo);
            f(ab + ".ln2_gain", a->ln2_gain);
            f(ab + ".ln2_bias", a->ln2_bias);
            f(ab + ".w1", a->w1);
            f(ab + ".b1", a->b1);
            f(ab + ".w2", a->w2);
            f(ab + ".b2", a->b2);
        }
    }
    f("keypoint.w_score", p.keypoint.w_score);
    f("keypoint.w_sigma", p.keypoint.w_sigma);
    f("keypoint.b_sigma", p.keypoint.b_sigma);
    f("match.bilinear", p.keypoint_match.bilinear);
    f("match.gain", p.keypoint_match.gain);
    f("match.bias", p.keypoint_match.bias);
    f("overlap.w", p.overlap_w);
    f("overlap.b", p.overlap_b);
}

}  // namespace detail

/// (name, tensor) pairs in traversal order.
inline std::vector<std::pair<std::string, Tensor*>> named_params(ModelParams& p) {
    std::vector<std::pair<std::string, Tensor*>> out;
    detail::visit_params(p, [&](const std::string& n, Tensor& t) { out.push_back({n, &t}); });
    return out;
}

/// Seeded initialization matching the config's shapes.
inline ModelParams init_model_params(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    ModelParams p;
    const auto& w = cfg.widths;
    p.backbone.up.push_back(random_mlp_params(rng, 3, 2 * w[1], w[1]));
    for (std::size_t s = 1; s + 1 < cfg.depth(); ++s)
        p.backbone.up.push_back(random_mlp_params(rng, 3 + w[s], 2 * w[s + 1], w[s + 1]));
    for (std::size_t lvl = 1; lvl + 1 < cfg.depth(); ++lvl)
        p.backbone.skip.push_back(random_mlp_params(rng, w[lvl] + w[lvl + 1], 2 * w[lvl], w[lvl]));

    const std::size_t ce = cfg.encoder_width();
    for (std::size_t b = 0; b < cfg.encoder_blocks; ++b) {
        EncoderBlockParamsT<Tensor> blk;
        blk.mamba = random_mamba_params(rng, ce, cfg.ssm_expand, cfg.ssm_state);
        blk.self_attn = random_attention_params(rng, ce);
        blk.cross_attn = random_attention_params(rng, ce);
        p.blocks.push_back(std::move(blk));
    }

    const std::size_t sd = cfg.depth() - 2;  // semi-dense level
    // Descriptors are [backbone feature ; parent's encoder-refined feature],
    // so the matching heads work at width w[sd] + ce.
    p.keypoint = random_keypoint_params(rng, w[sd] + ce);
    p.keypoint.w_score = uniform_tensor(rng, 1, w[sd - 1], 1.0 / std::sqrt(double(w[sd - 1])));
    p.keypoint_match = random_keypoint_match_params(rng, w[sd] + ce);
    p.overlap_w = uniform_tensor(rng, 1, ce, 1.0 / std::sqrt(double(ce)));
    p.overlap_b = Tensor(1, 1);
    return p;
}

/// Wraps every tensor as an autodiff parameter; `flat` (if given) receives the
/// Vars in traversal order, aligned with named_params of the source.
inline ModelParamsVar lift_model_params(const ModelParams& p, std::vector<Var>* flat = nullptr) {
    ModelParamsVar v;
    v.backbone.up.resize(p.backbone.up.size());
    v.backbone.skip.resize(p.backbone.skip.size());
    v.blocks.resize(p.blocks.size());
    std::vector<Tensor*> src;
    detail::visit_params(const_cast<ModelParams&>(p),
                         [&](const std::string&, Tensor& t) { src.push_back(&t); });
    std::vector<Var*> dst;
    detail::visit_params(v, [&](const std::string&, Var& t) { dst.push_back(&t); });
    for (std::size_t i = 0; i < src.size(); ++i) {
        *dst[i] = make_param(*src[i]);
        if (flat) flat->push_back(*dst[i]);
    }
    return v;
}

// ============================================================================
// Hybrid encoder
// ============================================================================

/// Min-corner normalized coordinates in [0,1]^3, shared scale across axes.
inline Tensor normalized_coordinates(const PointCloud& cloud) {
    cloud.require_nonempty();
    Vec3 lo = cloud.points[0], hi = cloud.points[0];
    for (const Vec3& p : cloud.points)
        for (int a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], p[a]);
            hi[a] = std::max(hi[a], p[a]);
        }
    double extent = 0.0;
    for (int a = 0; a < 3; ++a) extent = std::max(extent, hi[a] - lo[a]);
    if (extent <= 0.0) extent = 1.0;
    Tensor t(cloud.size(), 3);
    for (std::size_t i = 0; i < cloud.size(); ++i)
        for (int a = 0; a < 3; ++a) t(i, a) = (cloud.points[i][a] - lo[a]) / extent;
    return t;
}

template <typename T>
struct EncodedPairT {
    T src, tgt;                  // refined node features (rows = nodes)
    std::vector<T> match_layers; // dual-softmax match matrix after each block
    T overlap_src, overlap_tgt;  // per-node predicted overlap in (0,1)
};

using EncodedPair = EncodedPairT<Tensor>;
using EncodedPairVar = EncodedPairT<Var>;

/// One repetition: serialize -> state-space block over the ordered sequence ->
/// restore input order -> self attention -> cross attention. The variant
/// flags skip the corresponding block type; a match matrix is recorded after
/// every repetition.
template <typename T>
EncodedPairT<T> hybrid_encode(const T& f_src, const T& f_tgt, const PointCloud& pos_src,
                              const PointCloud& pos_tgt, const ModelParamsT<T>& params,
                              const ModelConfig& cfg) {
    if (rows_of(f_src) != pos_src.size() || rows_of(f_tgt) != pos_tgt.size())
        throw ShapeMismatch("encoder: one feature row per node");
    if (params.blocks.empty()) throw ShapeMismatch("encoder: no blocks");

    EncodedPairT<T> out;
    T fs = f_src, ft = f_tgt;
    if (cfg.concat_coordinates) {
        fs = concat_cols(fs, lift<T>(normalized_coordinates(pos_src)));
        ft = concat_cols(ft, lift<T>(normalized_coordinates(pos_tgt)));
    }

    const bool use_ssm = cfg.variant != Variant::transformer_only;
    const bool use_attn = cfg.variant != Variant::mamba_only;
    SerializedOrder so_src, so_tgt;
    if (use_ssm) {
        so_src = serialize_cloud(pos_src, cfg.curve, cfg.code_depth);
        so_tgt = serialize_cloud(pos_tgt, cfg.curve, cfg.code_depth);
    }

    for (const EncoderBlockParamsT<T>& blk : params.blocks) {
        if (use_ssm) {
            fs = gather_rows(mamba_block(blk.mamba, gather_rows(fs, so_src.order),
                                         cfg.order_indicator),
                             so_src.rank);
            ft = gather_rows(mamba_block(blk.mamba, gather_rows(ft, so_tgt.order),
                                         cfg.order_indicator),
                             so_tgt.rank);
        }
        if (use_attn) {
            fs = self_attention_block(blk.self_attn, fs);
            ft = self_attention_block(blk.self_attn, ft);
            auto crossed = cross_attention_block(blk.cross_attn, fs, ft);
            fs = std::move(crossed.first);
            ft = std::move(crossed.second);
        }
        out.match_layers.push_back(coarse_match(fs, ft, cfg.match_tau));
    }

    out.overlap_src = sigmoid(add_rows(matmul(fs, transpose(params.overlap_w)), params.overlap_b));
    out.overlap_tgt = sigmoid(add_rows(matmul(ft, transpose(params.overlap_w)), params.overlap_b));
    out.src = std::move(fs);
    out.tgt = std::move(ft);
    return out;
}

/// Feature stack for keypoint detection: the semi-dense level gets each
/// node's backbone feature concatenated with its parent's encoder-refined
/// feature, so descriptors carry cross-cloud context.
template <typename T>
std::vector<T> descriptor_features(const Hierarchy& h, const std::vector<T>& feats,
                                   const T& refined_top) {
    std::vector<T> out = feats;
    const std::size_t sd = h.depth() - 2;
    out[sd] = concat_cols(feats[sd], gather_rows(refined_top, h.levels[sd].parent));
    return out;
}

// ============================================================================
// Parameter serialization: JSON header + flat little-endian float64 payload
// ============================================================================

inline constexpr char kParamsMagic[8] = {'P', 'C', 'R', 'E', 'G', 'P', 'R', 'M'};

inline void save_params(const std::string& path, const ModelConfig& cfg, ModelParams& params) {
    nlohmann::json header;
    header["config"] = cfg;
    nlohmann::json tensors = nlohmann::json::array();
    std::vector<const Tensor*> order;
    for (auto& [name, t] : named_params(params)) {
        tensors.push_back({{"name", name}, {"rows", t->rows()}, {"cols", t->cols()}});
        order.push_back(t);
    }
    header["tensors"] = tensors;
    const std::string js = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DomainError("cannot write params '" + path + "'");
    out.write(kParamsMagic, sizeof kParamsMagic);
    const std::uint64_t len = js.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(js.data(), std::streamsize(js.size()));
    for (const Tensor* t : order)
        out.write(reinterpret_cast<const char*>(t->data().data()),
                  std::streamsize(t->size() * sizeof(double)));
    if (!out) throw DomainError("short write to '" + path + "'");
}

inline std::pair<ModelConfig, ModelParams> load_params(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DomainError("cannot open params '" + path + "'");
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::string(magic, 8) != std::string(kParamsMagic, 8))
        throw ParseError("not a parameter file", 0);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string js(len, '\0');
    in.read(js.data(), std::streamsize(len));
    if (!in) throw ParseError("truncated parameter header", 0);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("params header: ") + e.what(), 0);
    }
    ModelConfig cfg = header.at("config").get<ModelConfig>();
    ModelParams params = init_model_params(cfg);

    auto named = named_params(params);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != named.size()) throw ParseError("parameter count mismatch", 0);
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& meta = tensors[i];
        Tensor* t = named[i].second;
        if (meta.at("name").get<std::string>() != named[i].first ||
            meta.at("rows").get<std::size_t>() != t->rows() ||
            meta.at("cols").get<std::size_t>() != t->cols())
            throw ParseError("parameter layout mismatch at '" + named[i].first + "'", 0);
        in.read(reinterpret_cast<char*>(t->data().data()),
                std::streamsize(t->size() * sizeof(double)));
    }
    if (!in) throw ParseError("truncated parameter payload", 0);
    return {cfg, std::move(params)};
}

}  // namespace pcreg
