#include "cgfr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace cgfr {

double cosine_score(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_score: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw InputError("cosine_score: zero vector");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

void check_scores(const ScoreSet& s) {
    if (s.genuine.empty() || s.impostor.empty()) {
        throw InputError("score set needs both genuine and impostor scores");
    }
    for (double v : s.genuine) {
        if (!std::isfinite(v)) throw InputError("non-finite genuine score");
    }
    for (double v : s.impostor) {
        if (!std::isfinite(v)) throw InputError("non-finite impostor score");
    }
}

}  // namespace

RocCurve roc(const ScoreSet& scores) {
    check_scores(scores);
    std::vector<double> g = scores.genuine;
    std::vector<double> i = scores.impostor;
    std::sort(g.begin(), g.end(), std::greater<>());
    std::sort(i.begin(), i.end(), std::greater<>());

    std::vector<double> thresholds;
    thresholds.reserve(g.size() + i.size() + 2);
    thresholds.push_back(std::numeric_limits<double>::infinity());
    {
        std::vector<double> all = g;
        all.insert(all.end(), i.begin(), i.end());
        std::sort(all.begin(), all.end(), std::greater<>());
        all.erase(std::unique(all.begin(), all.end()), all.end());
        thresholds.insert(thresholds.end(), all.begin(), all.end());
    }
    thresholds.push_back(-std::numeric_limits<double>::infinity());

    RocCurve curve;
    curve.reserve(thresholds.size());
    std::size_t gi = 0, ii = 0;
    for (double t : thresholds) {
        while (gi < g.size() && g[gi] >= t) ++gi;
        while (ii < i.size() && i[ii] >= t) ++ii;
        curve.push_back({static_cast<double>(ii) / i.size(), static_cast<double>(gi) / g.size(), t});
    }
    return curve;
}

double auc(const RocCurve& curve) {
    double area = 0.0;
    for (std::size_t k = 1; k < curve.size(); ++k) {
        area += (curve[k].fpr - curve[k - 1].fpr) * 0.5 * (curve[k].tpr + curve[k - 1].tpr);
    }
    return area;
}

double eer(const ScoreSet& scores) {
    RocCurve curve = roc(scores);
    // d = fpr - fnr runs from -1 at the (0,0) end to +1 at (1,1).
    double prev_d = curve[0].fpr - (1.0 - curve[0].tpr);
    for (std::size_t k = 1; k < curve.size(); ++k) {
        double d = curve[k].fpr - (1.0 - curve[k].tpr);
        if (d >= 0.0) {
            if (d == prev_d) return curve[k].fpr;
            double alpha = -prev_d / (d - prev_d);
            double fpr = curve[k - 1].fpr + alpha * (curve[k].fpr - curve[k - 1].fpr);
            double fnr = (1.0 - curve[k - 1].tpr) + alpha * ((1.0 - curve[k].tpr) - (1.0 - curve[k - 1].tpr));
            return 0.5 * (fpr + fnr);
        }
        prev_d = d;
    }
    return 0.5;  // unreachable for valid inputs
}

double tpr_at_fpr(const RocCurve& curve, double target_fpr) {
    if (target_fpr < 0.0 || target_fpr > 1.0) {
        throw InputError("tpr_at_fpr: target outside [0,1]");
    }
    double best = 0.0;
    for (const RocPoint& p : curve) {
        if (p.fpr <= target_fpr) best = std::max(best, p.tpr);
    }
    return best;
}

double rank_k(const IdentificationTrial& trial, int k) {
    if (k < 1) throw ContractError("rank_k: k must be >= 1");
    if (trial.gallery.empty() || trial.probes.empty()) {
        throw InputError("rank_k: empty gallery or probe set");
    }
    std::vector<int> seen;
    for (const GalleryEntry& e : trial.gallery) {
        if (std::find(seen.begin(), seen.end(), e.identity) != seen.end()) {
            throw InputError("rank_k: duplicate gallery identity " + std::to_string(e.identity));
        }
        seen.push_back(e.identity);
    }
    int hits = 0;
    for (const GalleryEntry& probe : trial.probes) {
        int true_idx = -1;
        for (std::size_t j = 0; j < trial.gallery.size(); ++j) {
            if (trial.gallery[j].identity == probe.identity) {
                true_idx = static_cast<int>(j);
                break;
            }
        }
        if (true_idx < 0) {
            throw InputError("rank_k: probe identity " + std::to_string(probe.identity) +
                             " not enrolled (open-set probe)");
        }
        std::vector<double> s(trial.gallery.size());
        for (std::size_t j = 0; j < trial.gallery.size(); ++j) {
            s[j] = cosine_score(probe.embedding, trial.gallery[j].embedding);
        }
        int rank = 1;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (static_cast<int>(j) == true_idx) continue;
            if (s[j] > s[true_idx] || (s[j] == s[true_idx] && static_cast<int>(j) < true_idx)) {
                ++rank;
            }
        }
        if (rank <= k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(trial.probes.size());
}

std::vector<VerificationPair> build_verification_protocol(std::span<const int> identity_of_image,
                                                          std::uint64_t seed, int n_genuine,
                                                          int n_impostor) {
    int n = static_cast<int>(identity_of_image.size());
    std::vector<std::pair<int, int>> genuine, impostor;
    for (int a = 0; a < n; ++a) {
        for (int b = a + 1; b < n; ++b) {
            if (identity_of_image[a] == identity_of_image[b]) genuine.emplace_back(a, b);
            else impostor.emplace_back(a, b);
        }
    }
    if (static_cast<int>(genuine.size()) < n_genuine) {
        throw InputError("verification protocol: requested " + std::to_string(n_genuine) +
                         " genuine pairs but only " + std::to_string(genuine.size()) +
                         " exist");
    }
    if (static_cast<int>(impostor.size()) < n_impostor) {
        throw InputError("verification protocol: requested " + std::to_string(n_impostor) +
                         " impostor pairs but only " + std::to_string(impostor.size()) +
                         " exist");
    }
    Rng rng(seed);
    rng.shuffle(genuine);
    rng.shuffle(impostor);
    std::vector<VerificationPair> out;
    out.reserve(static_cast<std::size_t>(n_genuine + n_impostor));
    for (int i = 0; i < n_genuine; ++i) out.push_back({genuine[i].first, genuine[i].second, true});
    for (int i = 0; i < n_impostor; ++i) out.push_back({impostor[i].first, impostor[i].second, false});
    return out;
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void write_scores(const std::string& path, const ScoreSet& scores) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write scores to " + path);
    for (double v : scores.genuine) out << "genuine\t" << fmt_double(v) << '\n';
    for (double v : scores.impostor) out << "impostor\t" << fmt_double(v) << '\n';
}

ScoreSet read_scores(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scores file " + path);
    ScoreSet s;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("malformed score line: " + line);
        std::string label = line.substr(0, tab);
        double v = std::strtod(line.c_str() + tab + 1, nullptr);
        if (label == "genuine") s.genuine.push_back(v);
        else if (label == "impostor") s.impostor.push_back(v);
        else throw IoError("unknown score label '" + label + "'");
    }
    return s;
}

void write_roc_csv(const std::string& path, const RocCurve& curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write ROC to " + path);
    for (const RocPoint& p : curve) {
        out << fmt_double(p.fpr) << ',' << fmt_double(p.tpr) << ',' << fmt_double(p.threshold)
            << '\n';
    }
}

void write_metrics_summary(const std::string& path,
                           const std::map<std::string, double>& values) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write metrics summary to " + path);
    for (const char* key : {"auc", "eer", "tpr@1e-3", "tpr@1e-4", "rank1"}) {
        auto it = values.find(key);
        if (it != values.end()) out << key << '=' << fmt_double(it->second) << '\n';
    }
}

}  // namespace cgfr
