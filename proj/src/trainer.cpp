#include "cgfr/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>

namespace cgfr {

TrainConfig TrainConfig::from_run_config(const RunConfig& cfg, std::uint64_t seed) {
    TrainConfig t;
    t.batch_size = cfg.get_i("train.batch_size");
    t.phase1_epochs = cfg.get_i("train.phase1_epochs");
    t.phase2_epochs = cfg.get_i("train.phase2_epochs");
    t.lambda1 = cfg.get_f("tfrm.lambda1");
    t.lambda2 = cfg.get_f("tfrm.lambda2");
    t.schedule.lr_init = cfg.get_f("sched.lr_init");
    t.schedule.lr_peak = cfg.get_f("sched.lr_peak");
    t.schedule.lr_final = cfg.get_f("sched.lr_final");
    t.schedule.warmup_iters = cfg.get_i64("sched.warmup_iters");
    t.adamw_wd = cfg.get_f("train.adamw_wd");
    t.proj_lr = cfg.get_f("train.proj_lr");
    t.adam_beta1 = cfg.get_f("train.adam_beta1");
    t.adam_beta2 = cfg.get_f("train.adam_beta2");
    t.adam_eps = cfg.get_f("train.adam_eps");
    t.phase2_lr_scale = cfg.get_f("train.phase2_lr_scale");
    t.identity_loss_weight = cfg.get_f("train.identity_loss_weight");
    t.identity_scale = cfg.get_f("train.identity_scale");
    t.seed = seed;
    t.variant = parse_cfam_variant(cfg.get_s("cfam.variant"));
    t.damsm.gamma1 = cfg.get_f("damsm.gamma1");
    t.damsm.gamma2 = cfg.get_f("damsm.gamma2");
    t.damsm.gamma3 = cfg.get_f("damsm.gamma3");
    t.use_cls_caption = cfg.get_b("tfrm.use_cls_caption");
    t.text.dim = cfg.get_i("text.dim");
    t.text.layers = cfg.get_i("text.layers");
    t.text.heads = cfg.get_i("text.heads");
    t.text.ffn_mult = cfg.get_i("text.ffn_mult");
    t.text.ln_eps = cfg.get_f("norm.ln_eps");
    t.text.leaky_slope = cfg.get_f("act.leaky_slope");
    t.image_base_width = cfg.get_i("image.base_width");
    t.cfam.scale = cfg.get_f("cfam.scale");
    t.cfam.caption_heads = cfg.get_i("cfam.heads");
    t.cfam.leaky_slope = cfg.get_f("act.leaky_slope");
    t.cfam.ln_eps = cfg.get_f("norm.ln_eps");
    t.cfam.bn_momentum = cfg.get_f("norm.bn_momentum");
    t.cfam.bn_eps = cfg.get_f("norm.bn_eps");
    t.leaky_slope = cfg.get_f("act.leaky_slope");
    return t;
}

Models build_models(const TrainConfig& cfg, const Dataset& dataset, bool with_cfam) {
    Models m;
    m.vocab = Vocabulary::build(grammar_words());

    std::set<int> train_ids;
    for (int idx : dataset.train_idx) train_ids.insert(dataset.samples[idx].identity);
    if (train_ids.size() < 2) {
        throw ConfigError("training split needs at least 2 identities, got " +
                          std::to_string(train_ids.size()));
    }
    int label = 0;
    for (int id : train_ids) m.train_label[id] = label++;
    m.n_train_identities = label;

    m.variant = cfg.variant;
    m.use_cls_caption = cfg.use_cls_caption;
    Rng rng(cfg.seed);
    m.text = std::make_unique<TextEncoder>(cfg.text, m.vocab.size(), m.params, rng);
    m.image = std::make_unique<ImageEncoder>(cfg.image_base_width, m.params, rng,
                                             /*frozen=*/true, cfg.leaky_slope);
    m.tfrm = std::make_unique<TfrmHeads>(cfg.text.dim, m.n_train_identities, m.params, rng,
                                         cfg.use_cls_caption, cfg.leaky_slope);
    if (with_cfam) {
        m.cfam = std::make_unique<Cfam>(cfg.cfam, m.params, rng);
        int emb = m.cfam->embedding_dim(cfg.variant);
        m.id_head = m.params.add("idhead.w",
                                 uniform_init({m.n_train_identities, emb}, emb, rng));
    }
    return m;
}

FeatureCache encode_all(const Models& models, const Dataset& dataset) {
    FeatureCache cache;
    cache.feats.resize(dataset.samples.size());
    parallel_for(static_cast<std::int64_t>(dataset.samples.size()), [&](std::int64_t i) {
        NoGradGuard ng;
        cache.feats[static_cast<std::size_t>(i)] =
            models.image->forward(dataset.samples[static_cast<std::size_t>(i)].image);
    });
    return cache;
}

void write_report(const std::string& path, const TrainReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write report to " + path);
    char buf[64];
    out << "epochs=" << report.epochs.size() << '\n';
    for (std::size_t e = 0; e < report.epochs.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%.17g", report.epochs[e].damsm);
        out << "epoch" << e << ".damsm=" << buf << '\n';
        std::snprintf(buf, sizeof(buf), "%.17g", report.epochs[e].cmpc);
        out << "epoch" << e << ".cmpc=" << buf << '\n';
        std::snprintf(buf, sizeof(buf), "%.17g", report.epochs[e].identity);
        out << "epoch" << e << ".identity=" << buf << '\n';
    }
    std::snprintf(buf, sizeof(buf), "%.3f", report.wall_seconds);
    out << "wall_seconds=" << buf << '\n';
    out << "checkpoint=" << report.checkpoint_path << '\n';
}

std::vector<std::pair<int, int>> epoch_plan(std::uint64_t seed, int phase, int epoch,
                                            const std::vector<int>& train_idx,
                                            const Dataset& dataset) {
    Rng rng = Rng(seed).fork(0xE90C4ull + 1000 * static_cast<std::uint64_t>(phase) +
                             static_cast<std::uint64_t>(epoch));
    std::vector<int> order = train_idx;
    rng.shuffle(order);
    std::vector<std::pair<int, int>> plan;
    plan.reserve(order.size());
    for (int idx : order) {
        int n_caps = static_cast<int>(dataset.samples[idx].captions.size());
        plan.emplace_back(idx, rng.uniform_int(n_caps));
    }
    return plan;
}

namespace {

struct BatchText {
    std::vector<Tensor> words;     // [(L-1) x 64] per item
    std::vector<Tensor> captions;  // [64] per item
};

// Runs the text side for a batch: tokenization, contextual encoding, the
// n-gram projection and the caption embedding (batched when the CLS route is
// active so its normalization sees batch statistics).
BatchText text_forward(Models& m, const Dataset& data,
                       const std::vector<std::pair<int, int>>& items, bool use_cls, bool train) {
    BatchText out;
    std::vector<Tensor> cls_rows;
    for (const auto& [idx, cap] : items) {
        TokenSequence seq = tokenize(data.samples[idx].captions[cap], m.vocab);
        TextFeatures tf = m.text->forward(seq);
        out.words.push_back(m.tfrm->word_embeddings(tf.tokens_out));
        if (use_cls) cls_rows.push_back(tf.cls_out);
    }
    if (use_cls) {
        Tensor cap_batch = m.tfrm->caption_embedding_cls(stack_rows(cls_rows), train);
        for (std::size_t i = 0; i < items.size(); ++i) {
            out.captions.push_back(row(cap_batch, static_cast<int>(i)));
        }
    } else {
        for (const Tensor& w : out.words) out.captions.push_back(caption_embedding(w));
    }
    return out;
}

struct BatchLosses {
    Tensor damsm, cmpc;
    std::vector<Tensor> fused;  // empty unless requested
};

BatchLosses batch_losses(Models& m, const Dataset& data, const FeatureCache& cache,
                         const TrainConfig& cfg, const std::vector<std::pair<int, int>>& items,
                         bool with_fused, bool train) {
    BatchText text = text_forward(m, data, items, cfg.use_cls_caption, train);
    std::vector<DamsmPair> pairs;
    std::vector<Tensor> v64s, c64s;
    std::vector<int> labels;
    BatchLosses out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        int idx = items[i].first;
        const ImageFeatures& feats = cache.feats[static_cast<std::size_t>(idx)];
        Tensor regions = TfrmHeads::regions_of(m.tfrm->project_local(feats.local));
        Tensor v64 = m.tfrm->project_global(feats.global);
        pairs.push_back({regions, text.words[i], text.captions[i], v64});
        v64s.push_back(v64);
        c64s.push_back(text.captions[i]);
        labels.push_back(m.train_label.at(data.samples[idx].identity));
        if (with_fused) {
            out.fused.push_back(m.cfam->forward(cfg.variant, feats, text.words[i],
                                                text.captions[i], train));
        }
    }
    out.damsm = damsm_loss(pairs, cfg.damsm);
    out.cmpc = cmpc_loss(stack_rows(v64s), stack_rows(c64s), labels, m.tfrm->classifier());
    return out;
}

LrSchedule fit_schedule(const LrSchedule& base, std::int64_t total_iters) {
    LrSchedule s = base;
    s.total_iters = std::max<std::int64_t>(total_iters, 2);
    if (s.total_iters <= s.warmup_iters) {
        s.warmup_iters = std::max<std::int64_t>(1, s.total_iters / 10);
    }
    return s;
}

std::vector<int> batch_labels(const Models& m, const Dataset& data,
                              const std::vector<std::pair<int, int>>& items) {
    std::vector<int> labels;
    labels.reserve(items.size());
    for (const auto& [idx, cap] : items) {
        labels.push_back(m.train_label.at(data.samples[idx].identity));
    }
    return labels;
}

}  // namespace

TrainReport train_phase1(Models& models, const Dataset& dataset, const FeatureCache& cache,
                         const TrainConfig& cfg, const std::string& ckpt_path) {
    auto t0 = std::chrono::steady_clock::now();
    if (dataset.train_idx.empty()) throw ConfigError("phase 1: empty training split");
    int steps_per_epoch = static_cast<int>(dataset.train_idx.size()) / cfg.batch_size +
                          (static_cast<int>(dataset.train_idx.size()) % cfg.batch_size >= 2 ? 1 : 0);
    LrSchedule sched = fit_schedule(cfg.schedule,
                                    static_cast<std::int64_t>(steps_per_epoch) * cfg.phase1_epochs);

    OptimizerState text_opt;
    text_opt.kind = OptimKind::adamw;
    text_opt.weight_decay = cfg.adamw_wd;
    text_opt.eps = cfg.adam_eps;
    OptimizerState proj_opt;
    proj_opt.kind = OptimKind::adam;
    proj_opt.beta1 = cfg.adam_beta1;
    proj_opt.beta2 = cfg.adam_beta2;
    proj_opt.eps = cfg.adam_eps;

    std::vector<Parameter*> text_params = models.params.with_prefix("text.");
    std::vector<Parameter*> proj_params = models.params.with_prefix("tfrm.");
    bool zero_objective = cfg.lambda1 == 0.0 && cfg.lambda2 == 0.0;

    TrainReport report;
    std::int64_t iter = 0;
    for (int epoch = 0; epoch < cfg.phase1_epochs; ++epoch) {
        auto plan = epoch_plan(cfg.seed, 1, epoch, dataset.train_idx, dataset);
        EpochLoss sums;
        int batches = 0;
        for (std::size_t pos = 0; pos < plan.size(); pos += cfg.batch_size) {
            std::size_t end = std::min(plan.size(), pos + cfg.batch_size);
            if (end - pos < 2) break;  // batch losses degenerate below two pairs
            std::vector<std::pair<int, int>> items(plan.begin() + pos, plan.begin() + end);
            BatchLosses losses = batch_losses(models, dataset, cache, cfg, items,
                                              /*with_fused=*/false, /*train=*/true);
            Tensor loss = tfrm_objective(losses.damsm, losses.cmpc, cfg.lambda1, cfg.lambda2);
            sums.damsm += losses.damsm.item();
            sums.cmpc += losses.cmpc.item();
            ++batches;
            if (!zero_objective) {
                models.params.zero_grads();
                backward(loss);
                optimizer_step(text_opt, text_params, lr_at(sched, std::min(iter, sched.total_iters)));
                optimizer_step(proj_opt, proj_params, cfg.proj_lr);
            }
            ++iter;
        }
        if (batches == 0) throw ConfigError("phase 1: no usable batches (batch size too large?)");
        report.epochs.push_back({sums.damsm / batches, sums.cmpc / batches, 0.0});
    }

    save_checkpoint(ckpt_path, models.params);
    report.checkpoint_path = ckpt_path;
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

TrainReport train_phase2(Models& models, const Dataset& dataset, const FeatureCache& cache,
                         const TrainConfig& cfg, const std::string& init_ckpt,
                         const std::string& ckpt_path) {
    auto t0 = std::chrono::steady_clock::now();
    if (!models.cfam) throw ContractError("phase 2 requires models built with the fusion stack");
    if (!init_ckpt.empty()) {
        load_checkpoint_into(init_ckpt, models.params, /*exhaustive=*/false);
    }
    int steps_per_epoch = static_cast<int>(dataset.train_idx.size()) / cfg.batch_size +
                          (static_cast<int>(dataset.train_idx.size()) % cfg.batch_size >= 2 ? 1 : 0);
    LrSchedule sched = fit_schedule(cfg.schedule,
                                    static_cast<std::int64_t>(steps_per_epoch) * cfg.phase2_epochs);

    OptimizerState text_opt;
    text_opt.kind = OptimKind::adamw;
    text_opt.weight_decay = cfg.adamw_wd;
    text_opt.eps = cfg.adam_eps;
    OptimizerState proj_opt;
    proj_opt.kind = OptimKind::adam;
    proj_opt.beta1 = cfg.adam_beta1;
    proj_opt.beta2 = cfg.adam_beta2;
    proj_opt.eps = cfg.adam_eps;
    OptimizerState fusion_opt;
    fusion_opt.kind = OptimKind::adam;
    fusion_opt.beta1 = cfg.adam_beta1;
    fusion_opt.beta2 = cfg.adam_beta2;
    fusion_opt.eps = cfg.adam_eps;

    std::vector<Parameter*> text_params = models.params.with_prefix("text.");
    std::vector<Parameter*> proj_params = models.params.with_prefix("tfrm.");
    std::vector<Parameter*> fusion_params = models.params.with_prefix("cfam.");
    {
        auto id_params = models.params.with_prefix("idhead.");
        fusion_params.insert(fusion_params.end(), id_params.begin(), id_params.end());
    }

    TrainReport report;
    std::int64_t iter = 0;
    for (int epoch = 0; epoch < cfg.phase2_epochs; ++epoch) {
        auto plan = epoch_plan(cfg.seed, 2, epoch, dataset.train_idx, dataset);
        EpochLoss sums;
        int batches = 0;
        for (std::size_t pos = 0; pos < plan.size(); pos += cfg.batch_size) {
            std::size_t end = std::min(plan.size(), pos + cfg.batch_size);
            if (end - pos < 2) break;
            std::vector<std::pair<int, int>> items(plan.begin() + pos, plan.begin() + end);
            BatchLosses losses = batch_losses(models, dataset, cache, cfg, items,
                                              /*with_fused=*/true, /*train=*/true);
            Tensor fused = stack_rows(losses.fused);
            Tensor logits = scale(matmul(l2_normalize(fused), transpose2d(l2_normalize(models.id_head))),
                                  cfg.identity_scale);
            std::vector<int> labels = batch_labels(models, dataset, items);
            Tensor id_loss = cross_entropy_rows(logits, labels);
            Tensor loss = add(scale(id_loss, cfg.identity_loss_weight),
                              tfrm_objective(losses.damsm, losses.cmpc, cfg.lambda1, cfg.lambda2));
            sums.damsm += losses.damsm.item();
            sums.cmpc += losses.cmpc.item();
            sums.identity += id_loss.item();
            ++batches;
            models.params.zero_grads();
            backward(loss);
            double lr = lr_at(sched, std::min(iter, sched.total_iters)) * cfg.phase2_lr_scale;
            optimizer_step(text_opt, text_params, lr);
            optimizer_step(proj_opt, proj_params, cfg.proj_lr * cfg.phase2_lr_scale);
            optimizer_step(fusion_opt, fusion_params, cfg.proj_lr);
            ++iter;
        }
        if (batches == 0) throw ConfigError("phase 2: no usable batches (batch size too large?)");
        report.epochs.push_back({sums.damsm / batches, sums.cmpc / batches, sums.identity / batches});
    }

    save_checkpoint(ckpt_path, models.params);
    report.checkpoint_path = ckpt_path;
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

std::vector<std::vector<double>> eval_embeddings(Models& models, const Dataset& dataset,
                                                 const FeatureCache& cache,
                                                 const std::vector<int>& idx, bool image_only,
                                                 int caption_index) {
    std::vector<std::vector<double>> out(idx.size());
    parallel_for(static_cast<std::int64_t>(idx.size()), [&](std::int64_t i) {
        NoGradGuard ng;
        int s = idx[static_cast<std::size_t>(i)];
        const ImageFeatures& feats = cache.feats[static_cast<std::size_t>(s)];
        if (image_only) {
            auto d = feats.global.data();
            out[static_cast<std::size_t>(i)].assign(d.begin(), d.end());
            return;
        }
        if (!models.cfam) throw ContractError("fused embeddings need the fusion stack");
        const Sample& sample = dataset.samples[static_cast<std::size_t>(s)];
        int cap = caption_index % static_cast<int>(sample.captions.size());
        TokenSequence seq = tokenize(sample.captions[cap], models.vocab);
        TextFeatures tf = models.text->forward(seq);
        Tensor words = models.tfrm->word_embeddings(tf.tokens_out);
        Tensor caption;
        if (models.use_cls_caption) {
            std::vector<Tensor> one{tf.cls_out};
            caption = row(models.tfrm->caption_embedding_cls(stack_rows(one), false), 0);
        } else {
            caption = caption_embedding(words);
        }
        Tensor fused = models.cfam->forward(models.variant, feats, words, caption, false);
        auto d = fused.data();
        out[static_cast<std::size_t>(i)].assign(d.begin(), d.end());
    });
    return out;
}

ScoreSet verification_scores(Models& models, const Dataset& dataset, const FeatureCache& cache,
                             const EvalConfig& cfg, bool image_only) {
    std::vector<int> pool = dataset.gallery_idx;
    pool.insert(pool.end(), dataset.probe_idx.begin(), dataset.probe_idx.end());
    if (pool.empty()) throw InputError("verification: empty evaluation split");
    std::vector<int> identities(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) identities[i] = dataset.samples[pool[i]].identity;
    auto embeddings = eval_embeddings(models, dataset, cache, pool, image_only, cfg.caption_index);
    auto pairs = build_verification_protocol(identities, cfg.seed, cfg.n_genuine, cfg.n_impostor);
    ScoreSet scores;
    for (const VerificationPair& p : pairs) {
        double s = cosine_score(embeddings[p.a], embeddings[p.b]);
        (p.genuine ? scores.genuine : scores.impostor).push_back(s);
    }
    return scores;
}

EvalMetrics evaluate(Models& models, const Dataset& dataset, const FeatureCache& cache,
                     const EvalConfig& cfg, bool image_only) {
    EvalMetrics m;
    ScoreSet scores = verification_scores(models, dataset, cache, cfg, image_only);
    RocCurve curve = roc(scores);
    m.auc = auc(curve);
    m.eer = eer(scores);
    m.tpr_1e3 = tpr_at_fpr(curve, 1e-3);
    m.tpr_1e4 = tpr_at_fpr(curve, 1e-4);

    auto gal_emb = eval_embeddings(models, dataset, cache, dataset.gallery_idx, image_only,
                                   cfg.caption_index);
    auto probe_emb = eval_embeddings(models, dataset, cache, dataset.probe_idx, image_only,
                                     cfg.caption_index);
    IdentificationTrial trial;
    for (std::size_t i = 0; i < dataset.gallery_idx.size(); ++i) {
        trial.gallery.push_back({dataset.samples[dataset.gallery_idx[i]].identity, gal_emb[i]});
    }
    for (std::size_t i = 0; i < dataset.probe_idx.size(); ++i) {
        trial.probes.push_back({dataset.samples[dataset.probe_idx[i]].identity, probe_emb[i]});
    }
    m.rank1 = rank_k(trial, 1);
    return m;
}

}  // namespace cgfr
