#include "cgfr/cfam.hpp"

#include <cmath>

namespace cgfr {

CfamVariant parse_cfam_variant(const std::string& name) {
    if (name == "linear_only") return CfamVariant::linear_only;
    if (name == "word_only") return CfamVariant::word_only;
    if (name == "word_no_norm") return CfamVariant::word_no_norm;
    if (name == "word_no_selfattn") return CfamVariant::word_no_selfattn;
    if (name == "word_plus_caption") return CfamVariant::word_plus_caption;
    if (name == "full") return CfamVariant::full;
    throw ConfigError("unknown cfam.variant '" + name + "'");
}

const char* cfam_variant_name(CfamVariant v) {
    switch (v) {
        case CfamVariant::linear_only: return "linear_only";
        case CfamVariant::word_only: return "word_only";
        case CfamVariant::word_no_norm: return "word_no_norm";
        case CfamVariant::word_no_selfattn: return "word_no_selfattn";
        case CfamVariant::word_plus_caption: return "word_plus_caption";
        case CfamVariant::full: return "full";
    }
    throw ContractError("invalid CfamVariant");
}

// ---------------------------------------------------------------------------
// Attention2d
// ---------------------------------------------------------------------------

Attention2d::Attention2d(const std::string& prefix, const AttentionBlockConfig& cfg,
                         ParamStore& store, Rng& rng)
    : cfg_(cfg) {
    key_channels_ = std::max(1, static_cast<int>(std::lround(cfg.scale * cfg.value_channels)));
    int c = cfg.value_channels;
    wq_ = store.add(prefix + "q.w", uniform_init({key_channels_, c, 1, 1}, c, rng));
    bq_ = store.add(prefix + "q.b", Tensor::zeros({key_channels_}));
    wk_ = store.add(prefix + "k.w", uniform_init({key_channels_, c, 1, 1}, c, rng));
    bk_ = store.add(prefix + "k.b", Tensor::zeros({key_channels_}));
    wv_ = store.add(prefix + "v.w", uniform_init({c, c, 1, 1}, c, rng));
    bv_ = store.add(prefix + "v.b", Tensor::zeros({c}));
}

namespace {

// [C x H x W] -> [HW x C] token matrix.
Tensor to_tokens(const Tensor& x) {
    int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    return transpose2d(reshape(x, {c, hw}));
}

}  // namespace

Tensor Attention2d::attend(const Tensor& query_src, const Tensor& kv_src,
                           Tensor* attn_out) const {
    if (query_src.rank() != 3 || kv_src.rank() != 3 ||
        query_src.dim(0) != cfg_.value_channels || kv_src.dim(0) != cfg_.value_channels) {
        throw ShapeError("attention: inputs must be [C x H x W] with C = " +
                         std::to_string(cfg_.value_channels) + ", got " +
                         shape_str(query_src.dims()) + " and " + shape_str(kv_src.dims()));
    }
    Tensor q = to_tokens(conv2d(query_src, wq_, bq_, {}));
    Tensor k = to_tokens(conv2d(kv_src, wk_, bk_, {}));
    Tensor v = to_tokens(conv2d(kv_src, wv_, bv_, {}));
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(key_channels_));
    Tensor attn = softmax_rows(scale(matmul(q, transpose2d(k)), inv_sqrt));
    if (attn_out) *attn_out = attn;
    Tensor out_tokens = matmul(attn, v);  // [HWq x C]
    return reshape(transpose2d(out_tokens),
                   {cfg_.value_channels, query_src.dim(1), query_src.dim(2)});
}

Tensor Attention2d::self_forward(const Tensor& x, Tensor* attn_out) const {
    return add(x, attend(x, x, attn_out));
}

Tensor Attention2d::cross_forward(const Tensor& query_src, const Tensor& kv_src,
                                  Tensor* attn_out) const {
    return attend(query_src, kv_src, attn_out);
}

// ---------------------------------------------------------------------------
// Cfam
// ---------------------------------------------------------------------------

namespace {
constexpr int kWordCtxDim = 1024;
constexpr int kCapTokens = 8;
}  // namespace

Cfam::Cfam(const CfamConfig& cfg, ParamStore& store, Rng& rng)
    : cfg_(cfg),
      self_attn_("cfam.selfattn.", {kEmbedDim, cfg.scale, 1}, store, rng),
      cross_attn_("cfam.crossattn.", {kEmbedDim, cfg.scale, 1}, store, rng) {
    int concat_dim = 512 + kEmbedDim;  // 576
    lf_w_ = store.add("cfam.linear.w", uniform_init({concat_dim, cfg.linear_fused_dim}, concat_dim, rng));
    lf_b_ = store.add("cfam.linear.b", Tensor::zeros({cfg.linear_fused_dim}));

    bn_g_ = store.add("cfam.bn.g", Tensor::full({256}, 1.0));
    bn_b_ = store.add("cfam.bn.b", Tensor::zeros({256}));
    bn_.running_mean = store.add_buffer("cfam.bn.mean", Tensor::zeros({256}));
    bn_.running_var = store.add_buffer("cfam.bn.var", Tensor::full({256}, 1.0));
    bn_.momentum = cfg.bn_momentum;
    bn_.eps = cfg.bn_eps;

    conv_w_ = store.add("cfam.conv.w", uniform_init({kEmbedDim, 256, 3, 3}, 256 * 9, rng));
    conv_b_ = store.add("cfam.conv.b", Tensor::zeros({kEmbedDim}));

    ln1_g_ = store.add("cfam.ln1.g", Tensor::full({kEmbedDim}, 1.0));
    ln1_b_ = store.add("cfam.ln1.b", Tensor::zeros({kEmbedDim}));
    ln2_g_ = store.add("cfam.ln2.g", Tensor::full({kEmbedDim}, 1.0));
    ln2_b_ = store.add("cfam.ln2.b", Tensor::zeros({kEmbedDim}));

    cap_wq_ = store.add("cfam.cap.wq", uniform_init({kEmbedDim, kEmbedDim}, kEmbedDim, rng));
    cap_wk_ = store.add("cfam.cap.wk", uniform_init({kEmbedDim, kEmbedDim}, kEmbedDim, rng));
    cap_wv_ = store.add("cfam.cap.wv", uniform_init({kEmbedDim, kEmbedDim}, kEmbedDim, rng));
    cap_wo_ = store.add("cfam.cap.wo", uniform_init({kEmbedDim, kEmbedDim}, kEmbedDim, rng));
    ln3_g_ = store.add("cfam.ln3.g", Tensor::full({kEmbedDim}, 1.0));
    ln3_b_ = store.add("cfam.ln3.b", Tensor::zeros({kEmbedDim}));

    int agg_in = kWordCtxDim + kEmbedDim;  // 1088
    fan_w_ = store.add("cfam.fan.w", uniform_init({agg_in, kFusedDim}, agg_in, rng));
    fan_b_ = store.add("cfam.fan.b", Tensor::zeros({kFusedDim}));
    word_head_w_ = store.add("cfam.wordhead.w", uniform_init({kWordCtxDim, kFusedDim}, kWordCtxDim, rng));
    word_head_b_ = store.add("cfam.wordhead.b", Tensor::zeros({kFusedDim}));
}

Tensor Cfam::linear_fusion(const Tensor& global512, const Tensor& caption64) const {
    if (global512.dims() != Shape{512} || caption64.dims() != Shape{kEmbedDim}) {
        throw ShapeError("linear_fusion: expected [512] and [64], got " +
                         shape_str(global512.dims()) + " and " + shape_str(caption64.dims()));
    }
    return affine_vec(concat_vec(global512, caption64), lf_w_, lf_b_);
}

Tensor Cfam::channel_layer_norm(const Tensor& x, const Tensor& g, const Tensor& b) const {
    // Normalize each spatial position's channel vector.
    int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor tokens = transpose2d(reshape(x, {c, h * w}));
    Tensor normed = layer_norm(tokens, g, b, cfg_.ln_eps);
    return reshape(transpose2d(normed), {c, h, w});
}

Tensor Cfam::word_level(const Tensor& words, const Tensor& local, bool use_norm,
                        bool use_selfattn, bool train) {
    if (words.rank() != 2 || words.dim(0) != kTokenLen - 1 || words.dim(1) != kEmbedDim) {
        throw ShapeError("word_level: word matrix must be [(L-1) x 64], got " +
                         shape_str(words.dims()));
    }
    if (local.dims() != Shape{256, 14, 14}) {
        throw ShapeError("word_level: local features must be [256x14x14], got " +
                         shape_str(local.dims()));
    }
    // Image branch: (norm) -> conv 64@3x3 pad 2 -> 16x16 -> pool -> 8x8
    // -> (self-attention) -> (norm).
    Tensor img = local;
    if (use_norm) {
        Tensor batched = reshape(local, {1, 256, 14, 14});
        img = reshape(batch_norm(batched, bn_g_, bn_b_, bn_, train), {256, 14, 14});
    }
    Tensor x = conv2d(img, conv_w_, conv_b_, {.pad_h = 2, .pad_w = 2});  // [64x16x16]
    x = maxpool2d(x, 2, 2);                                              // [64x8x8]
    if (use_selfattn) x = self_attn_.self_forward(x);
    if (use_norm) x = channel_layer_norm(x, ln1_g_, ln1_b_);

    // Word branch: correlation of the word embedding matrix, one 8x8 map per
    // channel.
    Tensor gram = matmul(transpose2d(words), words);  // [64 x 64]
    Tensor word_map = reshape(gram, {kEmbedDim, kCapTokens, kCapTokens});

    Tensor fused = cross_attn_.cross_forward(word_map, x);  // [64x8x8]
    if (use_norm) fused = channel_layer_norm(fused, ln2_g_, ln2_b_);
    fused = maxpool2d(fused, 2, 2);  // [64x4x4]
    return reshape(fused, {kWordCtxDim});
}

Tensor Cfam::caption_level(const Tensor& caption64, const Tensor& global512) const {
    if (caption64.dims() != Shape{kEmbedDim} || global512.dims() != Shape{512}) {
        throw ShapeError("caption_level: expected [64] and [512], got " +
                         shape_str(caption64.dims()) + " and " + shape_str(global512.dims()));
    }
    int heads = cfg_.caption_heads;
    int dh = kEmbedDim / heads;
    Tensor tokens = reshape(global512, {kCapTokens, kEmbedDim});
    Tensor q = matmul(reshape(caption64, {1, kEmbedDim}), cap_wq_);  // [1 x 64]
    Tensor k = matmul(tokens, cap_wk_);
    Tensor v = matmul(tokens, cap_wv_);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor attn = softmax_rows(scale(matmul(qh, transpose2d(kh)), inv_sqrt));
        head_outs.push_back(matmul(attn, vh));
    }
    Tensor merged = matmul(concat_cols(head_outs), cap_wo_);  // [1 x 64]
    return layer_norm(row(merged, 0), ln3_g_, ln3_b_, cfg_.ln_eps);
}

Tensor Cfam::aggregate(const Tensor& word_ctx, const Tensor& cap_ctx) const {
    if (word_ctx.dims() != Shape{kWordCtxDim} || cap_ctx.dims() != Shape{kEmbedDim}) {
        throw ShapeError("aggregate: expected [1024] and [64], got " +
                         shape_str(word_ctx.dims()) + " and " + shape_str(cap_ctx.dims()));
    }
    return leaky_relu(affine_vec(concat_vec(word_ctx, cap_ctx), fan_w_, fan_b_),
                      cfg_.leaky_slope);
}

Tensor Cfam::forward(CfamVariant variant, const ImageFeatures& image, const Tensor& words,
                     const Tensor& caption, bool train) {
    switch (variant) {
        case CfamVariant::linear_only:
            return linear_fusion(image.global, caption);
        case CfamVariant::word_only:
        case CfamVariant::word_no_norm:
        case CfamVariant::word_no_selfattn: {
            bool use_norm = variant != CfamVariant::word_no_norm;
            bool use_sa = variant != CfamVariant::word_no_selfattn;
            Tensor ctx = word_level(words, image.local, use_norm, use_sa, train);
            return leaky_relu(affine_vec(ctx, word_head_w_, word_head_b_), cfg_.leaky_slope);
        }
        case CfamVariant::word_plus_caption: {
            Tensor w = word_level(words, image.local, true, true, train);
            Tensor c = caption_level(caption, image.global);
            return concat_vec(w, c);
        }
        case CfamVariant::full: {
            Tensor w = word_level(words, image.local, true, true, train);
            Tensor c = caption_level(caption, image.global);
            return aggregate(w, c);
        }
    }
    throw ContractError("invalid CfamVariant");
}

int Cfam::embedding_dim(CfamVariant variant) const {
    switch (variant) {
        case CfamVariant::linear_only: return cfg_.linear_fused_dim;
        case CfamVariant::word_only:
        case CfamVariant::word_no_norm:
        case CfamVariant::word_no_selfattn: return kFusedDim;
        case CfamVariant::word_plus_caption: return kWordCtxDim + kEmbedDim;
        case CfamVariant::full: return kFusedDim;
    }
    throw ContractError("invalid CfamVariant");
}

}  // namespace cgfr
