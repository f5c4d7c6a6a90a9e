#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cgfr/metrics.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cgfr;

TEST_CASE("cosine score") {
    std::vector<double> a{1.0, 2.0, 2.0};
    CHECK(cosine_score(a, a) == doctest::Approx(1.0));
    std::vector<double> b{2.0, -1.0, 0.0};
    std::vector<double> c{1.0, 2.0, 0.0};
    CHECK(cosine_score(b, c) == doctest::Approx(0.0));
    std::vector<double> na{-1.0, -2.0, -2.0};
    CHECK(cosine_score(a, na) == doctest::Approx(-1.0));
    std::vector<double> zero{0.0, 0.0, 0.0};
    CHECK_THROWS_AS(cosine_score(a, zero), InputError);
}

TEST_CASE("roc endpoints and separability") {
    ScoreSet sep{{0.9, 0.8}, {0.1, 0.2}};
    RocCurve c = roc(sep);
    CHECK(c.front().fpr == 0.0);
    CHECK(c.front().tpr == 0.0);
    CHECK(c.back().fpr == 1.0);
    CHECK(c.back().tpr == 1.0);
    bool reaches_perfect = false;
    for (const RocPoint& p : c) {
        if (p.fpr == 0.0 && p.tpr == 1.0) reaches_perfect = true;
    }
    CHECK(reaches_perfect);
    CHECK(auc(c) == doctest::Approx(1.0));
    CHECK(eer(sep) == doctest::Approx(0.0));

    // Identical distributions: the curve lies on the diagonal.
    ScoreSet same{{0.1, 0.5, 0.9}, {0.1, 0.5, 0.9}};
    for (const RocPoint& p : roc(same)) CHECK(p.fpr == doctest::Approx(p.tpr));
    CHECK(auc(roc(same)) == doctest::Approx(0.5));
    CHECK(eer(same) == doctest::Approx(0.5));

    CHECK_THROWS_AS(roc(ScoreSet{{}, {0.5}}), InputError);

    // Monotone along the sweep.
    Rng rng(3);
    ScoreSet rs;
    for (int i = 0; i < 64; ++i) rs.genuine.push_back(rng.normal() + 0.5);
    for (int i = 0; i < 80; ++i) rs.impostor.push_back(rng.normal());
    RocCurve rc = roc(rs);
    for (std::size_t i = 1; i < rc.size(); ++i) {
        CHECK(rc[i].fpr >= rc[i - 1].fpr);
        CHECK(rc[i].tpr >= rc[i - 1].tpr);
    }
}

TEST_CASE("metric oracle equivalence over random score sets") {
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        ScoreSet s;
        int ng = 80 + rng.uniform_int(41);
        int ni = 80 + rng.uniform_int(41);
        double sep = rng.uniform(0.0, 2.0);
        for (int i = 0; i < ng; ++i) s.genuine.push_back(rng.normal() + sep);
        for (int i = 0; i < ni; ++i) s.impostor.push_back(rng.normal());
        // Inject ties occasionally.
        if (trial % 3 == 0) {
            s.genuine[0] = s.impostor[0];
            s.genuine[1] = s.genuine[2];
        }

        RocCurve curve = roc(s);
        CHECK(std::abs(auc(curve) - oracle::auc_mann_whitney(s.genuine, s.impostor)) < 1e-12);

        double e = eer(s);
        double eg = oracle::eer_grid(s.genuine, s.impostor);
        CHECK(std::abs(e - eg) <= 1.0 / std::min(ng, ni) + 1e-9);

        for (double target : {1e-4, 1e-3, 0.05, 0.5, 1.0}) {
            CHECK(tpr_at_fpr(curve, target) ==
                  doctest::Approx(oracle::tpr_at_fpr_scan(s.genuine, s.impostor, target))
                      .epsilon(1e-12));
        }
    }
}

TEST_CASE("metrics are invariant to strictly increasing transforms") {
    Rng rng(23);
    ScoreSet s;
    for (int i = 0; i < 50; ++i) s.genuine.push_back(rng.normal() + 0.7);
    for (int i = 0; i < 70; ++i) s.impostor.push_back(rng.normal());
    auto transform = [](double x) { return std::tanh(x) * 3.0 + x / 7.0; };
    ScoreSet t;
    for (double v : s.genuine) t.genuine.push_back(transform(v));
    for (double v : s.impostor) t.impostor.push_back(transform(v));

    CHECK(auc(roc(s)) == doctest::Approx(auc(roc(t))).epsilon(1e-12));
    CHECK(eer(s) == doctest::Approx(eer(t)).epsilon(1e-12));
    CHECK(tpr_at_fpr(roc(s), 1e-3) == doctest::Approx(tpr_at_fpr(roc(t), 1e-3)));

    // Swapping genuine and impostor complements the AUC.
    ScoreSet swapped{s.impostor, s.genuine};
    CHECK(auc(roc(swapped)) == doctest::Approx(1.0 - auc(roc(s))).epsilon(1e-12));
}

TEST_CASE("rank-k identification") {
    Rng rng(31);
    IdentificationTrial trial;
    for (int id = 0; id < 20; ++id) {
        std::vector<double> e(16);
        for (double& v : e) v = rng.normal();
        trial.gallery.push_back({id, e});
    }
    // Probes identical to their gallery mates: rank-1 is perfect.
    trial.probes = trial.gallery;
    CHECK(rank_k(trial, 1) == doctest::Approx(1.0));

    // Random probes: rank-k matches a full sort oracle and k = gallery size
    // retrieves everything.
    for (auto& p : trial.probes) {
        for (double& v : p.embedding) v = rng.normal();
    }
    CHECK(rank_k(trial, 20) == doctest::Approx(1.0));
    for (int k : {1, 3, 7}) {
        int hits = 0;
        for (const auto& probe : trial.probes) {
            std::vector<std::pair<double, int>> order;
            for (std::size_t j = 0; j < trial.gallery.size(); ++j) {
                order.emplace_back(-cosine_score(probe.embedding, trial.gallery[j].embedding),
                                   static_cast<int>(j));
            }
            std::sort(order.begin(), order.end());
            for (int r = 0; r < k; ++r) {
                if (trial.gallery[order[r].second].identity == probe.identity) {
                    ++hits;
                    break;
                }
            }
        }
        CHECK(rank_k(trial, k) == doctest::Approx(static_cast<double>(hits) / trial.probes.size()));
    }

    // Non-decreasing in k.
    double prev = 0.0;
    for (int k = 1; k <= 20; ++k) {
        double r = rank_k(trial, k);
        CHECK(r >= prev);
        prev = r;
    }

    // Open-set probe rejected.
    IdentificationTrial open = trial;
    open.probes[0].identity = 999;
    CHECK_THROWS_AS(rank_k(open, 1), InputError);

    IdentificationTrial dup = trial;
    dup.gallery[3].identity = dup.gallery[2].identity;
    CHECK_THROWS_AS(rank_k(dup, 1), InputError);
}

TEST_CASE("verification protocol sampling") {
    // 1 image per identity: no genuine pairs exist.
    std::vector<int> singletons{0, 1, 2, 3};
    CHECK_THROWS_AS(build_verification_protocol(singletons, 1, 1, 1), InputError);

    std::vector<int> ids;
    for (int id = 0; id < 12; ++id)
        for (int j = 0; j < 4; ++j) ids.push_back(id);

    auto pairs1 = build_verification_protocol(ids, 42, 30, 100);
    auto pairs2 = build_verification_protocol(ids, 42, 30, 100);
    REQUIRE(pairs1.size() == pairs2.size());
    for (std::size_t i = 0; i < pairs1.size(); ++i) {
        CHECK(pairs1[i].a == pairs2[i].a);
        CHECK(pairs1[i].b == pairs2[i].b);
        CHECK(pairs1[i].genuine == pairs2[i].genuine);
    }

    // Labels are consistent and pairs are distinct.
    std::set<std::pair<int, int>> seen;
    int genuine = 0;
    for (const auto& p : pairs1) {
        CHECK(p.a != p.b);
        CHECK(seen.insert({p.a, p.b}).second);
        CHECK(p.genuine == (ids[p.a] == ids[p.b]));
        if (p.genuine) ++genuine;
    }
    CHECK(genuine == 30);
}

TEST_CASE("score and roc files round trip") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "cgfr_metrics_test";
    fs::create_directories(dir);

    Rng rng(7);
    ScoreSet s;
    for (int i = 0; i < 33; ++i) s.genuine.push_back(rng.normal() + 1);
    for (int i = 0; i < 44; ++i) s.impostor.push_back(rng.normal());
    std::string sp = (dir / "scores.tsv").string();
    write_scores(sp, s);
    ScoreSet r = read_scores(sp);
    REQUIRE(r.genuine.size() == s.genuine.size());
    REQUIRE(r.impostor.size() == s.impostor.size());
    for (std::size_t i = 0; i < s.genuine.size(); ++i) CHECK(r.genuine[i] == s.genuine[i]);
    for (std::size_t i = 0; i < s.impostor.size(); ++i) CHECK(r.impostor[i] == s.impostor[i]);

    // Writing the parsed scores again is byte-identical.
    std::string sp2 = (dir / "scores2.tsv").string();
    write_scores(sp2, r);
    std::ifstream f1(sp), f2(sp2);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(c1 == c2);

    std::string rp = (dir / "roc.csv").string();
    write_roc_csv(rp, roc(s));
    std::ifstream rf(rp);
    std::string line;
    int lines = 0;
    while (std::getline(rf, line)) {
        double fpr, tpr, thr;
        REQUIRE(std::sscanf(line.c_str(), "%lf,%lf,%lf", &fpr, &tpr, &thr) == 3);
        ++lines;
    }
    CHECK(lines == static_cast<int>(roc(s).size()));

    std::string mp = (dir / "metrics.txt").string();
    write_metrics_summary(mp, {{"auc", 0.9},
                               {"eer", 0.1},
                               {"tpr@1e-3", 0.5},
                               {"tpr@1e-4", 0.25},
                               {"rank1", 0.75}});
    std::ifstream mf(mp);
    std::string content((std::istreambuf_iterator<char>(mf)), std::istreambuf_iterator<char>());
    CHECK(content.find("auc=") != std::string::npos);
    CHECK(content.find("tpr@1e-4=") != std::string::npos);
    CHECK(content.find("rank1=") != std::string::npos);
}
