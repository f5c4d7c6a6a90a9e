#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "cgfr/metrics.hpp"
#include "doctest.h"

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code;
    std::string output;
};

// Runs the cgfr binary, capturing stdout+stderr.
RunResult run_cli(const std::string& args) {
    fs::path out = fs::temp_directory_path() / "cgfr_cli_out.txt";
    std::string cmd = std::string(CGFR_BIN) + " " + args + " > " + out.string() + " 2>&1";
    int status = std::system(cmd.c_str());
    std::ifstream in(out);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    int code = -1;
    if (WIFEXITED(status)) code = WEXITSTATUS(status);
    return {code, text};
}

std::string file_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

fs::path work_dir() {
    fs::path dir = fs::temp_directory_path() / "cgfr_cli_test";
    fs::create_directories(dir);
    return dir;
}

// Tiny run configuration shared by the CLI scenarios.
std::string micro_config() {
    fs::path p = work_dir() / "micro.cfg";
    std::ofstream out(p);
    out << "text.dim=32\ntext.layers=1\ntext.heads=2\ntext.ffn_mult=2\n"
        << "image.base_width=4\ntrain.batch_size=4\n"
        << "train.phase1_epochs=1\ntrain.phase2_epochs=1\n"
        << "data.n_identities=4\ndata.images_per_identity=3\n"
        << "data.captions_per_image=2\ndata.gallery_per_identity=1\n"
        << "data.probe_per_identity=1\neval.n_genuine=4\neval.n_impostor=12\n"
        << "degrade.preset=strong\n";
    return p.string();
}

}  // namespace

TEST_CASE("unknown flags and subcommands exit with code 2") {
    CHECK(run_cli("frobnicate").exit_code == 2);
    CHECK(run_cli("eval --no-such-flag").exit_code == 2);
    CHECK(run_cli("").exit_code == 2);  // a subcommand is required
    RunResult help = run_cli("--help");
    CHECK(help.exit_code == 0);
    CHECK(help.output.find("gen-data") != std::string::npos);
}

TEST_CASE("selftest passes") {
    RunResult r = run_cli("selftest --seed 5");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("FAIL") == std::string::npos);
}

TEST_CASE("gen-data is deterministic for a fixed seed") {
    fs::path d1 = work_dir() / "data1";
    fs::path d2 = work_dir() / "data2";
    fs::remove_all(d1);
    fs::remove_all(d2);
    std::string cfg = micro_config();
    CHECK(run_cli("--config " + cfg + " --seed 7 --out " + d1.string() + " gen-data").exit_code == 0);
    CHECK(run_cli("--config " + cfg + " --seed 7 --out " + d2.string() + " gen-data").exit_code == 0);
    CHECK(file_bytes(d1 / "manifest.tsv") == file_bytes(d2 / "manifest.tsv"));
    CHECK(fs::exists(d1 / "vocab.tsv"));

    // A different seed changes the data.
    fs::path d3 = work_dir() / "data3";
    fs::remove_all(d3);
    CHECK(run_cli("--config " + cfg + " --seed 8 --out " + d3.string() + " gen-data").exit_code == 0);
    CHECK(file_bytes(d1 / "manifest.tsv") != file_bytes(d3 / "manifest.tsv"));
}

TEST_CASE("eval on a perfectly separated score file") {
    fs::path scores = work_dir() / "perfect.tsv";
    {
        cgfr::ScoreSet s;
        for (int i = 0; i < 20; ++i) s.genuine.push_back(0.8 + 0.01 * i);
        for (int i = 0; i < 30; ++i) s.impostor.push_back(0.1 + 0.01 * i);
        cgfr::write_scores(scores.string(), s);
    }
    RunResult r = run_cli("eval --scores " + scores.string());
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("auc=1.000000") != std::string::npos);
    CHECK(r.output.find("eer=0.000000") != std::string::npos);
    CHECK(r.output.find("tpr_fpr_1e-4=1.000000") != std::string::npos);
}

TEST_CASE("export-roc emits parseable csv") {
    fs::path scores = work_dir() / "roc_scores.tsv";
    {
        cgfr::ScoreSet s{{0.9, 0.7, 0.6}, {0.2, 0.4, 0.5, 0.1}};
        cgfr::write_scores(scores.string(), s);
    }
    fs::path out_csv = work_dir() / "roc.csv";
    RunResult r = run_cli("export-roc --scores " + scores.string() + " --out-file " +
                          out_csv.string());
    CHECK(r.exit_code == 0);
    std::ifstream in(out_csv);
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
        double fpr, tpr, thr;
        REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf", &fpr, &tpr, &thr) == 3);
        ++rows;
    }
    CHECK(rows >= 5);
}

TEST_CASE("train, eval and ablate run end to end on a micro dataset") {
    std::string cfg = micro_config();
    fs::path data = work_dir() / "pipeline_data";
    fs::path run = work_dir() / "pipeline_run";
    fs::remove_all(data);
    fs::remove_all(run);
    REQUIRE(run_cli("--config " + cfg + " --seed 21 --out " + data.string() + " gen-data")
                .exit_code == 0);

    RunResult train = run_cli("--config " + cfg + " --seed 21 --out " + run.string() +
                              " train --data " + data.string() + " --phase all");
    CHECK(train.exit_code == 0);
    CHECK(fs::exists(run / "phase1.ckpt"));
    CHECK(fs::exists(run / "phase2.ckpt"));
    CHECK(fs::exists(run / "phase1.report"));
    CHECK(fs::exists(run / "phase2.report"));

    RunResult eval = run_cli("--config " + cfg + " --seed 21 --out " + (run / "eval").string() +
                             " eval --data " + data.string() + " --checkpoint " +
                             (run / "phase2.ckpt").string());
    CHECK(eval.exit_code == 0);
    for (const char* key : {"auc=", "eer=", "tpr_fpr_1e-3=", "tpr_fpr_1e-4=", "rank1="}) {
        INFO(key);
        CHECK(eval.output.find(key) != std::string::npos);
    }
    CHECK(fs::exists(run / "eval" / "metrics.txt"));
    CHECK(fs::exists(run / "eval" / "scores.tsv"));

    // Evaluating the missing-file checkpoint is a runtime error (exit 1).
    CHECK(run_cli("eval --data " + data.string() + " --checkpoint /nonexistent.ckpt --config " +
                  cfg)
              .exit_code == 1);

    RunResult ablate = run_cli("--config " + cfg + " --seed 21 --out " + (run / "abl").string() +
                               " ablate --data " + data.string());
    CHECK(ablate.exit_code == 0);
    for (const char* name : {"linear_only", "word_only", "word_no_norm", "word_no_selfattn",
                             "word_plus_caption", "full"}) {
        INFO(name);
        CHECK(ablate.output.find(name) != std::string::npos);
    }
    // The table file has a header plus one row per variant.
    std::ifstream table(run / "abl" / "ablation.tsv");
    int rows = 0;
    std::string line;
    while (std::getline(table, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 7);
}
