#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cgfr/common.hpp"

namespace cgfr {

/// Labeled 1:1 comparison scores; higher means more similar.
struct ScoreSet {
    std::vector<double> genuine;
    std::vector<double> impostor;
};

struct RocPoint {
    double fpr;
    double tpr;
    double threshold;
};
/// Swept from the strictest threshold (+inf sentinel, (0,0)) to the loosest
/// (-inf, (1,1)); fpr and tpr are non-decreasing along the curve.
using RocCurve = std::vector<RocPoint>;

/// Cosine similarity of two embeddings; throws InputError on a zero vector.
double cosine_score(std::span<const double> a, std::span<const double> b);

/// ROC swept over the union of observed scores plus sentinels. Accept rule is
/// score >= threshold.
RocCurve roc(const ScoreSet& scores);

/// Trapezoidal area under the curve.
double auc(const RocCurve& curve);

/// Operating point where FPR equals FNR, linearly interpolated at the sign
/// change along the threshold sweep.
double eer(const ScoreSet& scores);

/// Largest TPR among curve points with fpr <= target (step-function
/// convention, no optimistic interpolation).
double tpr_at_fpr(const RocCurve& curve, double target_fpr);

struct GalleryEntry {
    int identity;
    std::vector<double> embedding;
};

/// Closed-set identification trial: unique gallery identities, every probe
/// identity enrolled.
struct IdentificationTrial {
    std::vector<GalleryEntry> gallery;
    std::vector<GalleryEntry> probes;
};

/// Fraction of probes whose true identity ranks in the top k by cosine score.
/// Score ties are broken toward the lower gallery index.
double rank_k(const IdentificationTrial& trial, int k);

struct VerificationPair {
    int a;
    int b;
    bool genuine;
};

/// Samples without replacement n_genuine same-identity and n_impostor
/// cross-identity image pairs, deterministically from the seed.
/// identity_of_image[i] is the identity label of image i.
std::vector<VerificationPair> build_verification_protocol(std::span<const int> identity_of_image,
                                                          std::uint64_t seed, int n_genuine,
                                                          int n_impostor);

// File formats ---------------------------------------------------------------

/// UTF-8 lines "label<TAB>score", label in {genuine, impostor}.
void write_scores(const std::string& path, const ScoreSet& scores);
ScoreSet read_scores(const std::string& path);

/// Plot-ready comma-separated lines "fpr,tpr,threshold".
void write_roc_csv(const std::string& path, const RocCurve& curve);

/// Structured text summary keyed auc, eer, tpr@1e-3, tpr@1e-4, rank1.
void write_metrics_summary(const std::string& path,
                           const std::map<std::string, double>& values);

}  // namespace cgfr
