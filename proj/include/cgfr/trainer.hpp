#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cgfr/cfam.hpp"
#include "cgfr/checkpoint.hpp"
#include "cgfr/config.hpp"
#include "cgfr/datagen.hpp"
#include "cgfr/encoders.hpp"
#include "cgfr/metrics.hpp"
#include "cgfr/tfrm.hpp"

namespace cgfr {

struct TrainConfig {
    int batch_size = 16;
    int phase1_epochs = 4;
    int phase2_epochs = 24;
    double lambda1 = 1.0;
    double lambda2 = 0.5;
    LrSchedule schedule;  // warmup is shrunk to 10% when a run is shorter
    double adamw_wd = 0.02;
    double proj_lr = 1e-3;
    double adam_beta1 = 0.5;
    double adam_beta2 = 0.99;
    double adam_eps = 1e-8;
    double phase2_lr_scale = 0.1;
    double identity_loss_weight = 1.0;
    double identity_scale = 16.0;
    std::uint64_t seed = 0;
    CfamVariant variant = CfamVariant::full;
    DamsmConfig damsm;
    bool use_cls_caption = false;
    TextEncoderConfig text;
    int image_base_width = 16;
    CfamConfig cfam;
    double leaky_slope = 0.2;

    static TrainConfig from_run_config(const RunConfig& cfg, std::uint64_t seed);
};

/// The full model stack. The image encoder is always frozen; `cfam` and the
/// identity head exist only when built for phase 2 / evaluation of fused
/// embeddings.
struct Models {
    Vocabulary vocab;
    ParamStore params;
    std::unique_ptr<TextEncoder> text;
    std::unique_ptr<ImageEncoder> image;
    std::unique_ptr<TfrmHeads> tfrm;
    std::unique_ptr<Cfam> cfam;
    Tensor id_head;  // [n_train_identities x embedding_dim(variant)]
    int n_train_identities = 0;
    std::map<int, int> train_label;  // identity id -> dense label
    CfamVariant variant = CfamVariant::full;
    bool use_cls_caption = false;
};

/// Builds the stack with deterministic initialization from cfg.seed. The
/// vocabulary comes from the caption grammar. Throws ConfigError when the
/// training split has fewer than two identities.
Models build_models(const TrainConfig& cfg, const Dataset& dataset, bool with_cfam);

/// Frozen-encoder features for every sample, computed once (no graph).
struct FeatureCache {
    std::vector<ImageFeatures> feats;
};
FeatureCache encode_all(const Models& models, const Dataset& dataset);

struct EpochLoss {
    double damsm = 0.0;
    double cmpc = 0.0;
    double identity = 0.0;
};

struct TrainReport {
    std::vector<EpochLoss> epochs;
    double wall_seconds = 0.0;
    std::string checkpoint_path;
};

void write_report(const std::string& path, const TrainReport& report);

/// Deterministic epoch plan: shuffled training positions with the caption
/// index drawn for each, all from (seed, phase, epoch).
std::vector<std::pair<int, int>> epoch_plan(std::uint64_t seed, int phase, int epoch,
                                            const std::vector<int>& train_idx,
                                            const Dataset& dataset);

/// Phase 1: optimizes the text encoder (AdamW, warmup+cosine schedule) and
/// the projection heads (Adam) against the combined alignment/projection
/// objective; the image encoder stays frozen. Writes a checkpoint of the
/// whole store to ckpt_path.
TrainReport train_phase1(Models& models, const Dataset& dataset, const FeatureCache& cache,
                         const TrainConfig& cfg, const std::string& ckpt_path);

/// Phase 2: end-to-end training of the fusion stack plus identity head, with
/// text encoder and projection heads continuing at a reduced rate. init_ckpt
/// is a phase-1 (or phase-2, for resuming) checkpoint.
TrainReport train_phase2(Models& models, const Dataset& dataset, const FeatureCache& cache,
                         const TrainConfig& cfg, const std::string& init_ckpt,
                         const std::string& ckpt_path);

struct EvalConfig {
    int n_genuine = 500;
    int n_impostor = 5000;
    int caption_index = 0;
    std::uint64_t seed = 0;
};

struct EvalMetrics {
    double auc = 0.0;
    double eer = 1.0;
    double tpr_1e3 = 0.0;
    double tpr_1e4 = 0.0;
    double rank1 = 0.0;
};

/// Embeddings for the given sample indices: the fused CGFR embedding, or the
/// raw global image feature when image_only is set (the encoder baseline).
std::vector<std::vector<double>> eval_embeddings(Models& models, const Dataset& dataset,
                                                 const FeatureCache& cache,
                                                 const std::vector<int>& idx, bool image_only,
                                                 int caption_index);

/// 1:1 scores over the pooled gallery+probe images under the seeded pair
/// protocol.
ScoreSet verification_scores(Models& models, const Dataset& dataset, const FeatureCache& cache,
                             const EvalConfig& cfg, bool image_only);

/// Full evaluation: verification (AUC/EER/TPR@FPR) and closed-set rank-1.
EvalMetrics evaluate(Models& models, const Dataset& dataset, const FeatureCache& cache,
                     const EvalConfig& cfg, bool image_only);

}  // namespace cgfr
