// Command-line front end: registration, synthetic data, serialization dumps,
// cost benchmarks, gradient checks, toy training, and dataset evaluation.
//
// Exit codes: 0 success, 1 check failure, 2 domain error, 3 usage/parse error.
// Machine-readable output (JSON/CSV) goes to stdout, human summaries to stderr.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pcreg/bench.hpp"
#include "pcreg/checks.hpp"
#include "pcreg/registration.hpp"
#include "pcreg/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

pcreg::RigidTransform read_gt_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw pcreg::DomainError("cannot open ground truth '" + path + "'");
    pcreg::RigidTransform t;
    try {
        json j;
        in >> j;
        const auto& rot = j.at("rotation");
        const auto& tr = j.at("translation");
        if (rot.size() != 9 || tr.size() != 3)
            throw pcreg::ParseError("ground truth needs rotation[9] and translation[3]", 0);
        for (int i = 0; i < 9; ++i) t.rotation[std::size_t(i)] = rot[i].get<double>();
        for (int i = 0; i < 3; ++i) t.translation[std::size_t(i)] = tr[i].get<double>();
    } catch (const json::exception& e) {
        throw pcreg::ParseError(std::string("ground truth: ") + e.what(), 0);
    }
    return t;
}

void write_gt_json(const std::string& path, const pcreg::RigidTransform& t) {
    json j;
    j["rotation"] = t.rotation;
    j["translation"] = t.translation;
    std::ofstream out(path);
    if (!out) throw pcreg::DomainError("cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

/// A pair directory holds src.xyz, tgt.xyz, gt.json (the synth layout). The
/// root may be a single pair directory or a directory of them.
std::vector<pcreg::SynthPair> load_pair_dirs(const std::string& root) {
    std::vector<fs::path> dirs;
    if (fs::exists(fs::path(root) / "src.xyz")) {
        dirs.push_back(root);
    } else {
        for (const auto& entry : fs::directory_iterator(root))
            if (entry.is_directory() && fs::exists(entry.path() / "src.xyz"))
                dirs.push_back(entry.path());
        std::sort(dirs.begin(), dirs.end());
    }
    std::vector<pcreg::SynthPair> out;
    for (const fs::path& d : dirs) {
        pcreg::SynthPair p;
        p.src = pcreg::read_cloud_file((d / "src.xyz").string());
        p.tgt = pcreg::read_cloud_file((d / "tgt.xyz").string());
        p.gt = read_gt_json((d / "gt.json").string());
        out.push_back(std::move(p));
    }
    if (out.empty()) throw pcreg::EmptySet("no pair directories under '" + root + "'");
    return out;
}

/// Training/ablation data: high-overlap pairs whose seeds are derived from the
/// run seed so the whole exercise is reproducible from one number.
std::vector<pcreg::SynthPair> toy_dataset(std::size_t pairs, std::uint64_t seed) {
    std::vector<pcreg::SynthPair> out;
    out.reserve(pairs);
    for (std::size_t i = 0; i < pairs; ++i)
        out.push_back(pcreg::synth_pair(pcreg::synth_preset("highoverlap", 300, seed * 1000 + i)));
    return out;
}

// ----------------------------------------------------------------------------

struct RegisterOpts {
    std::string src, tgt, config, params, gt;
    bool oracle = false;
};

int run_register(const RegisterOpts& o) {
    pcreg::ModelConfig cfg;
    pcreg::ModelParams params;
    if (!o.params.empty()) {
        std::tie(cfg, params) = pcreg::load_params(o.params);
    } else {
        if (!o.config.empty()) cfg = pcreg::load_model_config(o.config);
        params = pcreg::init_model_params(cfg);
    }

    pcreg::PointCloud src = pcreg::read_cloud_file(o.src);
    pcreg::PointCloud tgt = pcreg::read_cloud_file(o.tgt);
    pcreg::RigidTransform gt;
    if (o.oracle) gt = read_gt_json(o.gt);

    pcreg::RegistrationResult r =
        pcreg::register_pair(src, tgt, params, cfg, o.oracle ? &gt : nullptr);

    std::cout << pcreg::registration_json(r).dump(2) << "\n";
    double total_ms = 0.0;
    for (const auto& t : r.diagnostics.timings) total_ms += t.ms;
    std::fprintf(stderr,
                 "registered %zu -> %zu points: %zu coarse pairs, %zu/%zu keypoints, "
                 "%zu fine pairs, inlier ratio %.3f, %.1f ms\n",
                 r.diagnostics.src_points, r.diagnostics.tgt_points, r.diagnostics.coarse_pairs,
                 r.diagnostics.keypoints_src, r.diagnostics.keypoints_tgt,
                 r.diagnostics.fine_pairs, r.diagnostics.inlier_ratio, total_ms);
    return 0;
}

struct SynthOpts {
    std::string preset = "highoverlap";
    std::size_t points = 1000;
    std::uint64_t seed = 7;
    std::string out;
};

int run_synth(const SynthOpts& o) {
    pcreg::SynthPair pair =
        pcreg::synth_pair(pcreg::synth_preset(o.preset, o.points, o.seed));
    fs::create_directories(o.out);
    pcreg::write_xyz_file((fs::path(o.out) / "src.xyz").string(), pair.src);
    pcreg::write_xyz_file((fs::path(o.out) / "tgt.xyz").string(), pair.tgt);
    write_gt_json((fs::path(o.out) / "gt.json").string(), pair.gt);
    std::fprintf(stderr, "wrote %s: %zu / %zu points, measured overlap %.3f\n", o.out.c_str(),
                 pair.src.size(), pair.tgt.size(), pair.measured_overlap);
    return 0;
}

struct SerializeOpts {
    std::string in;
    std::string curve = "zorder";
    int depth = 16;
};

int run_serialize(const SerializeOpts& o) {
    pcreg::PointCloud cloud = pcreg::read_cloud_file(o.in);
    pcreg::SerializedOrder so =
        pcreg::serialize_cloud(cloud, pcreg::curve_from_name(o.curve), o.depth);
    for (std::size_t i = 0; i < cloud.size(); ++i)
        std::printf("%zu %llu %zu\n", i, static_cast<unsigned long long>(so.code[i]), so.rank[i]);
    return 0;
}

struct BenchOpts {
    std::vector<std::size_t> lengths{256, 512, 1024, 1536};
    std::vector<std::string> paths{"ssm", "attn", "hybrid"};
    std::uint64_t seed = 7;
    std::string out;
};

int run_bench(const BenchOpts& o) {
    std::vector<pcreg::BenchPath> paths;
    for (const std::string& p : o.paths) paths.push_back(pcreg::bench_path_from_name(p));
    pcreg::BenchConfig bc;
    bc.seed = o.seed;
    std::vector<pcreg::ScalingRow> rows = pcreg::scaling_study(o.lengths, paths, bc);

    if (o.out.empty()) {
        pcreg::write_scaling_csv(std::cout, rows);
    } else {
        std::ofstream f(o.out);
        if (!f) throw pcreg::DomainError("cannot write '" + o.out + "'");
        pcreg::write_scaling_csv(f, rows);
    }
    for (pcreg::BenchPath p : paths)
        for (std::size_t i = 1; i < o.lengths.size(); ++i)
            std::fprintf(
                stderr, "%s %zu -> %zu: flops ratio %.3f\n", pcreg::bench_path_name(p),
                o.lengths[i - 1], o.lengths[i],
                pcreg::flops_ratio(rows, pcreg::bench_path_name(p), o.lengths[i - 1],
                                   o.lengths[i]));
    return 0;
}

struct GradcheckOpts {
    std::string module = "all";
};

int run_gradcheck(const GradcheckOpts& o) {
    std::vector<pcreg::CheckResult> rows;
    if (o.module == "losses")
        rows = pcreg::gradcheck_losses();
    else if (o.module == "ssm")
        rows = pcreg::gradcheck_ssm();
    else if (o.module == "attention")
        rows = pcreg::gradcheck_attention();
    else if (o.module == "backbone")
        rows = pcreg::gradcheck_backbone();
    else if (o.module == "coarse")
        rows = pcreg::gradcheck_coarse_stage();
    else
        rows = pcreg::gradcheck_all();

    bool all_pass = true;
    for (const pcreg::CheckResult& r : rows) {
        std::printf("%-34s %s  max_rel_err %.3e\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                    r.max_rel_err);
        all_pass = all_pass && r.pass;
    }
    std::fprintf(stderr, "%zu checks, %s\n", rows.size(), all_pass ? "all passed" : "FAILURES");
    return all_pass ? 0 : 1;
}

struct TrainOpts {
    std::size_t pairs = 20;
    std::size_t steps = 200;
    std::uint64_t seed = 1;
    std::string out, trace;
};

int run_train_toy(const TrainOpts& o) {
    pcreg::ModelConfig cfg = pcreg::ModelConfig::toy();
    cfg.seed = o.seed;
    std::vector<pcreg::SynthPair> dataset = toy_dataset(o.pairs, o.seed);
    pcreg::TrainResult result = pcreg::train_toy(dataset, cfg, o.steps);

    auto write_trace = [&](std::ostream& os) {
        os << "step,total,keypoint,spot,coarse,infonce,keycorr,inlier,pose_t,pose_r\n";
        char line[512];
        for (std::size_t s = 0; s < result.trace.size(); ++s) {
            const pcreg::LossTermsT<double>& t = result.term_trace[s];
            std::snprintf(line, sizeof line,
                          "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", s,
                          result.trace[s], t.keypoint, t.spot, t.coarse, t.infonce, t.keycorr,
                          t.inlier, t.pose_t, t.pose_r);
            os << line;
        }
    };
    if (o.trace.empty()) {
        write_trace(std::cout);
    } else {
        std::ofstream f(o.trace);
        if (!f) throw pcreg::DomainError("cannot write '" + o.trace + "'");
        write_trace(f);
    }
    if (!o.out.empty()) pcreg::save_params(o.out, cfg, result.params);

    const std::size_t w = std::min<std::size_t>(20, result.trace.size());
    const double first = pcreg::smoothed_loss(result.trace, 0, w);
    const double last = pcreg::smoothed_loss(result.trace, result.trace.size() - w, w);
    std::fprintf(stderr, "%zu steps on %zu pairs: smoothed loss %.4f -> %.4f (ratio %.3f)\n",
                 o.steps, o.pairs, first, last, last / first);
    return 0;
}

struct EvalOpts {
    std::string pairs, params;
    bool oracle = false;
    double rot_thresh = 5.0;
    double trans_thresh = 0.1;
};

int run_eval(const EvalOpts& o) {
    auto [cfg, params] = pcreg::load_params(o.params);
    std::vector<pcreg::SynthPair> dataset = load_pair_dirs(o.pairs);
    pcreg::EvalSummary s =
        pcreg::evaluate_pairs(dataset, params, cfg, o.oracle, o.rot_thresh, o.trans_thresh);

    json j;
    j["pairs"] = s.pairs;
    j["failures"] = s.failures;
    j["recall"] = s.recall;
    j["mean_rre_deg"] = s.mean_rre_deg;
    j["mean_rte"] = s.mean_rte;
    std::cout << j.dump(2) << "\n";
    std::fprintf(stderr, "%zu pairs: recall %.1f%%, mean RRE %.4f deg, mean RTE %.5f\n", s.pairs,
                 100.0 * s.recall, s.mean_rre_deg, s.mean_rte);
    return 0;
}

struct AblateOpts {
    std::size_t pairs = 6;
    std::size_t steps = 40;
    std::uint64_t seed = 1;
    std::string out;
};

int run_ablate(const AblateOpts& o) {
    pcreg::ModelConfig cfg = pcreg::ModelConfig::toy();
    cfg.seed = o.seed;
    std::vector<pcreg::AblationRow> rows =
        pcreg::run_ablations(toy_dataset(o.pairs, o.seed), cfg, o.steps);
    if (o.out.empty()) {
        pcreg::write_ablation_csv(std::cout, rows);
    } else {
        std::ofstream f(o.out);
        if (!f) throw pcreg::DomainError("cannot write '" + o.out + "'");
        pcreg::write_ablation_csv(f, rows);
    }
    std::fprintf(stderr, "%zu ablation rows (%zu steps on %zu pairs)\n", rows.size(), o.steps,
                 o.pairs);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Point cloud registration with a hybrid state-space / attention encoder"};
    app.require_subcommand(1);
    app.footer("Exit codes: 0 success, 1 check failure, 2 domain error, 3 usage/parse error.");

    int rc = 0;

    RegisterOpts reg;
    CLI::App* c_reg = app.add_subcommand("register", "Register a source cloud onto a target");
    c_reg->add_option("--src", reg.src, "Source cloud (.xyz or .ply)")
        ->required()
        ->check(CLI::ExistingFile);
    c_reg->add_option("--tgt", reg.tgt, "Target cloud (.xyz or .ply)")
        ->required()
        ->check(CLI::ExistingFile);
    CLI::Option* o_cfg =
        c_reg->add_option("--config", reg.config, "Model config JSON")->check(CLI::ExistingFile);
    CLI::Option* o_par = c_reg->add_option("--params", reg.params, "Trained parameter file")
                             ->check(CLI::ExistingFile)
                             ->excludes(o_cfg);
    (void)o_par;
    CLI::Option* o_gt = c_reg->add_option("--gt", reg.gt, "Ground-truth transform JSON")
                            ->check(CLI::ExistingFile);
    c_reg->add_flag("--oracle-features", reg.oracle,
                    "Replace learned matching with ground-truth-frame proximity (requires --gt)")
        ->needs(o_gt);
    c_reg->callback([&] { rc = run_register(reg); });

    SynthOpts syn;
    CLI::App* c_syn = app.add_subcommand("synth", "Generate a synthetic registration pair");
    c_syn->add_option("--preset", syn.preset, "Overlap regime")
        ->check(CLI::IsMember({"highoverlap", "lowoverlap"}));
    c_syn->add_option("--points", syn.points, "Nominal points per view");
    c_syn->add_option("--seed", syn.seed, "Generator seed");
    c_syn->add_option("--out", syn.out, "Output directory (src.xyz, tgt.xyz, gt.json)")
        ->required();
    c_syn->callback([&] { rc = run_synth(syn); });

    SerializeOpts ser;
    CLI::App* c_ser = app.add_subcommand("serialize", "Dump the space-filling-curve order");
    c_ser->add_option("--in", ser.in, "Input cloud")->required()->check(CLI::ExistingFile);
    c_ser->add_option("--curve", ser.curve, "Curve")
        ->check(CLI::IsMember(
            {"zorder", "hilbert", "xyz", "trans_zorder", "trans_hilbert", "trans_xyz"}));
    c_ser->add_option("--depth", ser.depth, "Quantization bits per axis")
        ->check(CLI::Range(1, 20));
    c_ser->callback([&] { rc = run_serialize(ser); });

    BenchOpts ben;
    CLI::App* c_ben = app.add_subcommand("bench", "Sequence-length cost scaling study");
    c_ben->add_option("--lengths", ben.lengths, "Ascending token counts")->delimiter(',');
    c_ben->add_option("--paths", ben.paths, "Encoder paths to measure")
        ->delimiter(',')
        ->check(CLI::IsMember({"ssm", "attn", "hybrid"}));
    c_ben->add_option("--seed", ben.seed, "Parameter seed");
    c_ben->add_option("--out", ben.out, "CSV path (default stdout)");
    c_ben->callback([&] { rc = run_bench(ben); });

    GradcheckOpts grd;
    CLI::App* c_grd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    c_grd->add_option("--module", grd.module, "Which checks to run")
        ->check(CLI::IsMember({"losses", "ssm", "attention", "backbone", "coarse", "all"}));
    c_grd->callback([&] { rc = run_gradcheck(grd); });

    TrainOpts trn;
    CLI::App* c_trn = app.add_subcommand("train-toy", "Train on small synthetic pairs");
    c_trn->add_option("--pairs", trn.pairs, "Number of synthetic pairs");
    c_trn->add_option("--steps", trn.steps, "Optimizer steps");
    c_trn->add_option("--seed", trn.seed, "Run seed (init and data)");
    c_trn->add_option("--out", trn.out, "Where to save trained parameters");
    c_trn->add_option("--trace", trn.trace, "Loss trace CSV path (default stdout)");
    c_trn->callback([&] { rc = run_train_toy(trn); });

    EvalOpts evl;
    CLI::App* c_evl = app.add_subcommand("eval", "Evaluate registration over pair directories");
    c_evl->add_option("--pairs", evl.pairs, "Directory of pairs (or one pair directory)")
        ->required()
        ->check(CLI::ExistingDirectory);
    c_evl->add_option("--params", evl.params, "Trained parameter file")
        ->required()
        ->check(CLI::ExistingFile);
    c_evl->add_flag("--oracle-features", evl.oracle, "Use ground-truth-frame matching");
    c_evl->add_option("--rot-thresh", evl.rot_thresh, "Success threshold, degrees");
    c_evl->add_option("--trans-thresh", evl.trans_thresh, "Success threshold, distance");
    c_evl->callback([&] { rc = run_eval(evl); });

    AblateOpts abl;
    CLI::App* c_abl = app.add_subcommand("ablate", "Encoder-variant and curve ablation table");
    c_abl->add_option("--pairs", abl.pairs, "Number of synthetic pairs");
    c_abl->add_option("--steps", abl.steps, "Optimizer steps per variant");
    c_abl->add_option("--seed", abl.seed, "Run seed");
    c_abl->add_option("--out", abl.out, "CSV path (default stdout)");
    c_abl->callback([&] { rc = run_ablate(abl); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);  // --help and friends
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 3;
    } catch (const pcreg::ParseError& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 3;
    } catch (const pcreg::UnsupportedPlyFeature& e) {
        std::fprintf(stderr, "parse error: %s\n", e.what());
        return 3;
    } catch (const pcreg::DomainError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return rc;
}
