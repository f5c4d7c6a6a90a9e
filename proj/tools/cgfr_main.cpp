// cgfr: data generation, two-phase training, evaluation, ablation sweeps and
// ROC export for the caption-guided face recognition pipeline.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cgfr/cfam.hpp"
#include "cgfr/config.hpp"
#include "cgfr/datagen.hpp"
#include "cgfr/metrics.hpp"
#include "cgfr/ops.hpp"
#include "cgfr/tfrm.hpp"
#include "cgfr/trainer.hpp"

namespace fs = std::filesystem;
using namespace cgfr;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out_dir;
};

RunConfig load_config(const GlobalArgs& g) {
    RunConfig cfg = RunConfig::defaults();
    if (!g.config_path.empty()) cfg.load_file(g.config_path);
    return cfg;
}

void print_kv(const char* key, double value) {
    std::printf("%s=%.6f\n", key, value);
}

int cmd_gen_data(const GlobalArgs& g) {
    if (g.out_dir.empty()) throw ConfigError("gen-data requires --out DIR");
    RunConfig cfg = load_config(g);
    DataConfig dc = DataConfig::from_run_config(cfg);
    Dataset ds = build_dataset(dc, g.seed);
    fs::create_directories(g.out_dir);
    write_dataset(g.out_dir, ds);
    Vocabulary::build(grammar_words()).save((fs::path(g.out_dir) / "vocab.tsv").string());
    std::printf("wrote %zu samples (%d identities) to %s\n", ds.samples.size(), ds.n_identities,
                g.out_dir.c_str());
    return 0;
}

int cmd_train(const GlobalArgs& g, const std::string& data_dir, const std::string& phase,
              const std::string& init_ckpt) {
    if (g.out_dir.empty()) throw ConfigError("train requires --out DIR");
    RunConfig cfg = load_config(g);
    DataConfig dc = DataConfig::from_run_config(cfg);
    Dataset ds = load_dataset(data_dir, dc);
    TrainConfig tc = TrainConfig::from_run_config(cfg, g.seed);
    fs::create_directories(g.out_dir);

    bool run1 = phase == "1" || phase == "all";
    bool run2 = phase == "2" || phase == "all";
    std::string p1_path = (fs::path(g.out_dir) / "phase1.ckpt").string();
    std::string p2_path = (fs::path(g.out_dir) / "phase2.ckpt").string();

    if (run1) {
        Models models = build_models(tc, ds, /*with_cfam=*/false);
        FeatureCache cache = encode_all(models, ds);
        TrainReport rep = train_phase1(models, ds, cache, tc, p1_path);
        write_report((fs::path(g.out_dir) / "phase1.report").string(), rep);
        for (std::size_t e = 0; e < rep.epochs.size(); ++e) {
            std::printf("phase1 epoch %zu  damsm=%.4f  cmpc=%.4f\n", e, rep.epochs[e].damsm,
                        rep.epochs[e].cmpc);
        }
        std::printf("phase1 done in %.1fs -> %s\n", rep.wall_seconds, p1_path.c_str());
    }
    if (run2) {
        std::string init = !init_ckpt.empty() ? init_ckpt : p1_path;
        Models models = build_models(tc, ds, /*with_cfam=*/true);
        FeatureCache cache = encode_all(models, ds);
        TrainReport rep = train_phase2(models, ds, cache, tc, init, p2_path);
        write_report((fs::path(g.out_dir) / "phase2.report").string(), rep);
        for (std::size_t e = 0; e < rep.epochs.size(); ++e) {
            std::printf("phase2 epoch %zu  identity=%.4f  damsm=%.4f  cmpc=%.4f\n", e,
                        rep.epochs[e].identity, rep.epochs[e].damsm, rep.epochs[e].cmpc);
        }
        std::printf("phase2 done in %.1fs -> %s\n", rep.wall_seconds, p2_path.c_str());
    }
    return 0;
}

int cmd_eval(const GlobalArgs& g, const std::string& data_dir, const std::string& ckpt,
             const std::string& protocol, const std::string& scores_path, bool baseline) {
    RunConfig cfg = load_config(g);
    if (!scores_path.empty()) {
        ScoreSet scores = read_scores(scores_path);
        RocCurve curve = roc(scores);
        print_kv("auc", auc(curve));
        print_kv("eer", eer(scores));
        print_kv("tpr_fpr_1e-3", tpr_at_fpr(curve, 1e-3));
        print_kv("tpr_fpr_1e-4", tpr_at_fpr(curve, 1e-4));
        if (!g.out_dir.empty()) {
            fs::create_directories(g.out_dir);
            write_metrics_summary((fs::path(g.out_dir) / "metrics.txt").string(),
                                  {{"auc", auc(curve)},
                                   {"eer", eer(scores)},
                                   {"tpr@1e-3", tpr_at_fpr(curve, 1e-3)},
                                   {"tpr@1e-4", tpr_at_fpr(curve, 1e-4)}});
        }
        return 0;
    }

    DataConfig dc = DataConfig::from_run_config(cfg);
    Dataset ds = load_dataset(data_dir, dc);
    TrainConfig tc = TrainConfig::from_run_config(cfg, g.seed);
    Models models = build_models(tc, ds, /*with_cfam=*/true);
    if (!ckpt.empty()) load_checkpoint_into(ckpt, models.params, /*exhaustive=*/false);
    FeatureCache cache = encode_all(models, ds);
    EvalConfig ec{cfg.get_i("eval.n_genuine"), cfg.get_i("eval.n_impostor"),
                  cfg.get_i("eval.caption_index"), g.seed};

    bool verify = protocol == "verify" || protocol == "both";
    bool identify = protocol == "identify" || protocol == "both";
    EvalMetrics m = evaluate(models, ds, cache, ec, baseline);
    if (verify) {
        print_kv("auc", m.auc);
        print_kv("eer", m.eer);
        print_kv("tpr_fpr_1e-3", m.tpr_1e3);
        print_kv("tpr_fpr_1e-4", m.tpr_1e4);
    }
    if (identify) print_kv("rank1", m.rank1);
    if (!g.out_dir.empty()) {
        fs::create_directories(g.out_dir);
        write_metrics_summary((fs::path(g.out_dir) / "metrics.txt").string(),
                              {{"auc", m.auc},
                               {"eer", m.eer},
                               {"tpr@1e-3", m.tpr_1e3},
                               {"tpr@1e-4", m.tpr_1e4},
                               {"rank1", m.rank1}});
        ScoreSet scores = verification_scores(models, ds, cache, ec, baseline);
        write_scores((fs::path(g.out_dir) / "scores.tsv").string(), scores);
    }
    return 0;
}

int cmd_ablate(const GlobalArgs& g, const std::string& data_dir) {
    if (g.out_dir.empty()) throw ConfigError("ablate requires --out DIR");
    RunConfig cfg = load_config(g);
    DataConfig dc = DataConfig::from_run_config(cfg);
    Dataset ds = load_dataset(data_dir, dc);
    fs::create_directories(g.out_dir);
    EvalConfig ec{cfg.get_i("eval.n_genuine"), cfg.get_i("eval.n_impostor"),
                  cfg.get_i("eval.caption_index"), g.seed};

    TrainConfig tc = TrainConfig::from_run_config(cfg, g.seed);
    std::string p1_path = (fs::path(g.out_dir) / "ablate_phase1.ckpt").string();
    {
        Models models = build_models(tc, ds, /*with_cfam=*/false);
        FeatureCache cache = encode_all(models, ds);
        train_phase1(models, ds, cache, tc, p1_path);
    }

    const CfamVariant variants[] = {CfamVariant::linear_only,     CfamVariant::word_only,
                                    CfamVariant::word_no_norm,    CfamVariant::word_no_selfattn,
                                    CfamVariant::word_plus_caption, CfamVariant::full};
    std::string table_path = (fs::path(g.out_dir) / "ablation.tsv").string();
    std::string table = "variant\tauc\teer\ttpr_fpr_1e-4\ttpr_fpr_1e-3\trank1\n";
    std::printf("%-18s %8s %8s %10s %10s %8s\n", "variant", "auc", "eer", "tpr@1e-4", "tpr@1e-3",
                "rank1");
    for (CfamVariant v : variants) {
        TrainConfig vc = tc;
        vc.variant = v;
        Models models = build_models(vc, ds, /*with_cfam=*/true);
        FeatureCache cache = encode_all(models, ds);
        std::string p2 = (fs::path(g.out_dir) / (std::string("ablate_") + cfam_variant_name(v) +
                                                 ".ckpt"))
                             .string();
        train_phase2(models, ds, cache, vc, p1_path, p2);
        EvalMetrics m = evaluate(models, ds, cache, ec, /*image_only=*/false);
        std::printf("%-18s %8.4f %8.4f %10.4f %10.4f %8.4f\n", cfam_variant_name(v), m.auc, m.eer,
                    m.tpr_1e4, m.tpr_1e3, m.rank1);
        char line[256];
        std::snprintf(line, sizeof(line), "%s\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n",
                      cfam_variant_name(v), m.auc, m.eer, m.tpr_1e4, m.tpr_1e3, m.rank1);
        table += line;
    }
    std::ofstream(table_path, std::ios::trunc) << table;
    return 0;
}

int cmd_export_roc(const GlobalArgs& g, const std::string& scores_path,
                   const std::string& data_dir, const std::string& ckpt,
                   const std::string& out_file, bool baseline) {
    RunConfig cfg = load_config(g);
    ScoreSet scores;
    if (!scores_path.empty()) {
        scores = read_scores(scores_path);
    } else {
        if (data_dir.empty()) throw ConfigError("export-roc needs --scores or --data");
        DataConfig dc = DataConfig::from_run_config(cfg);
        Dataset ds = load_dataset(data_dir, dc);
        TrainConfig tc = TrainConfig::from_run_config(cfg, g.seed);
        Models models = build_models(tc, ds, /*with_cfam=*/true);
        if (!ckpt.empty()) load_checkpoint_into(ckpt, models.params, /*exhaustive=*/false);
        FeatureCache cache = encode_all(models, ds);
        EvalConfig ec{cfg.get_i("eval.n_genuine"), cfg.get_i("eval.n_impostor"),
                      cfg.get_i("eval.caption_index"), g.seed};
        scores = verification_scores(models, ds, cache, ec, baseline);
    }
    RocCurve curve = roc(scores);
    if (out_file.empty()) {
        for (const RocPoint& p : curve) std::printf("%.17g,%.17g,%.17g\n", p.fpr, p.tpr, p.threshold);
    } else {
        write_roc_csv(out_file, curve);
        std::printf("wrote %zu ROC points to %s\n", curve.size(), out_file.c_str());
    }
    return 0;
}

// Compact oracle suite: quick independent checks of the numerical core.
int cmd_selftest(const GlobalArgs& g) {
    int failures = 0;
    auto check = [&](const char* name, bool ok) {
        std::printf("[%s] %s\n", ok ? "PASS" : "FAIL", name);
        if (!ok) ++failures;
    };
    Rng rng(g.seed ^ 0x5E1F7E57ull);

    {  // matmul against a triple loop
        int m = 4, k = 5, n = 3;
        std::vector<double> a(m * k), b(k * n);
        for (double& v : a) v = rng.uniform(-1, 1);
        for (double& v : b) v = rng.uniform(-1, 1);
        Tensor ta = Tensor::from_vector({m, k}, a), tb = Tensor::from_vector({k, n}, b);
        Tensor tc = matmul(ta, tb);
        double err = 0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0;
                for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
                err = std::max(err, std::abs(s - tc.at({i, j})));
            }
        check("matmul matches triple-loop oracle", err < 1e-12);
    }
    {  // gradient of a small composite against finite differences
        Tensor x = Tensor::from_vector({2, 3}, {0.3, -0.4, 0.9, 1.2, -0.8, 0.1});
        x.set_requires_grad(true);
        auto loss_fn = [&] { return sum(mul(softmax_rows(x), x)); };
        x.zero_grad();
        backward(loss_fn());
        std::vector<double> analytic(x.grad().begin(), x.grad().end());
        double max_rel = 0;
        auto data = x.data_mut();
        for (std::size_t i = 0; i < data.size(); ++i) {
            double eps = 1e-3, saved = data[i];
            data[i] = saved + eps;
            double fp = loss_fn().item();
            data[i] = saved - eps;
            double fm = loss_fn().item();
            data[i] = saved;
            double fd = (fp - fm) / (2 * eps);
            max_rel = std::max(max_rel, std::abs(fd - analytic[i]) /
                                            std::max({1.0, std::abs(fd), std::abs(analytic[i])}));
        }
        check("reverse-mode gradient matches finite differences", max_rel < 1e-4);
    }
    {  // AUC against the pairwise Mann-Whitney statistic
        ScoreSet s;
        for (int i = 0; i < 60; ++i) s.genuine.push_back(rng.normal() + 0.8);
        for (int i = 0; i < 80; ++i) s.impostor.push_back(rng.normal());
        double a = auc(roc(s));
        double u = 0;
        for (double gg : s.genuine)
            for (double ii : s.impostor) u += gg > ii ? 1.0 : (gg == ii ? 0.5 : 0.0);
        u /= s.genuine.size() * s.impostor.size();
        check("auc matches Mann-Whitney oracle", std::abs(a - u) < 1e-12);
    }
    {  // alignment loss closed forms
        Rng r2(7);
        auto rnd = [&](Shape s) {
            std::vector<double> d(shape_numel(s));
            for (double& v : d) v = r2.uniform(-1, 1);
            return Tensor::from_vector(s, d);
        };
        DamsmPair p{rnd({196, 64}), rnd({20, 64}), l2_normalize(rnd({64})), rnd({64})};
        std::vector<DamsmPair> one{p};
        double l1 = damsm_loss(one, {}).item();
        std::vector<DamsmPair> two{p, p};
        double l2 = damsm_loss(two, {}).item();
        check("single-pair alignment loss is zero", std::abs(l1) < 1e-12);
        check("duplicate-pair alignment loss is 4 ln 2",
              std::abs(l2 - 4 * std::log(2.0)) < 1e-10);
    }
    std::printf("%d failure(s)\n", failures);
    return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"caption-guided face recognition pipeline"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand

    GlobalArgs g;
    app.add_option("--config", g.config_path, "run configuration file (key=value lines)");
    app.add_option("--seed", g.seed, "random seed");
    app.add_option("--out", g.out_dir, "output directory");

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");

    auto* train = app.add_subcommand("train", "run the two-phase trainer");
    std::string data_dir, phase = "all", init_ckpt;
    train->add_option("--data", data_dir, "dataset directory")->required();
    train->add_option("--phase", phase, "1, 2 or all")
        ->check(CLI::IsMember({"1", "2", "all"}));
    train->add_option("--checkpoint", init_ckpt, "initial checkpoint for phase 2");

    auto* eval = app.add_subcommand("eval", "evaluate verification and identification");
    std::string eval_data, eval_ckpt, protocol = "both", scores_path;
    bool baseline = false;
    eval->add_option("--data", eval_data, "dataset directory");
    eval->add_option("--checkpoint", eval_ckpt, "model checkpoint");
    eval->add_option("--protocol", protocol, "verify, identify or both")
        ->check(CLI::IsMember({"verify", "identify", "both"}));
    eval->add_option("--scores", scores_path, "score file (label<TAB>score) to evaluate directly");
    eval->add_flag("--baseline", baseline, "evaluate the image-only encoder baseline");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate every fusion variant");
    std::string ablate_data;
    ablate->add_option("--data", ablate_data, "dataset directory")->required();

    auto* roc_cmd = app.add_subcommand("export-roc", "export fpr,tpr,threshold lines");
    std::string roc_scores, roc_data, roc_ckpt, roc_out;
    bool roc_baseline = false;
    roc_cmd->add_option("--scores", roc_scores, "score file to sweep");
    roc_cmd->add_option("--data", roc_data, "dataset directory");
    roc_cmd->add_option("--checkpoint", roc_ckpt, "model checkpoint");
    roc_cmd->add_option("--out-file", roc_out, "output CSV path (stdout when omitted)");
    roc_cmd->add_flag("--baseline", roc_baseline, "score the image-only baseline");

    auto* selftest = app.add_subcommand("selftest", "run the built-in oracle suite");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(g);
        if (train->parsed()) return cmd_train(g, data_dir, phase, init_ckpt);
        if (eval->parsed()) return cmd_eval(g, eval_data, eval_ckpt, protocol, scores_path, baseline);
        if (ablate->parsed()) return cmd_ablate(g, ablate_data);
        if (roc_cmd->parsed())
            return cmd_export_roc(g, roc_scores, roc_data, roc_ckpt, roc_out, roc_baseline);
        if (selftest->parsed()) return cmd_selftest(g);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
