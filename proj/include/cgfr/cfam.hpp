#pragma once

#include <string>

#include "cgfr/encoders.hpp"
#include "cgfr/optim.hpp"
#include "cgfr/ops.hpp"
#include "cgfr/tfrm.hpp"

namespace cgfr {

/// Width of the fused identity embedding produced by the aggregation network.
constexpr int kFusedDim = 768;

/// Ablation rows: which sub-networks of the fusion module are active.
enum class CfamVariant {
    linear_only,
    word_only,
    word_no_norm,
    word_no_selfattn,
    word_plus_caption,
    full,
};

CfamVariant parse_cfam_variant(const std::string& name);
const char* cfam_variant_name(CfamVariant v);
constexpr int kCfamVariantCount = 6;

struct AttentionBlockConfig {
    int value_channels = 64;
    double scale = 0.5;  // key/query channels = round(scale * value_channels)
    int heads = 1;
};

/// Spatial attention over a [C x H x W] map with keys/queries/values learned
/// by 1x1 convolutions. Key/query width follows the configured scale; logits
/// are divided by sqrt(d_k).
class Attention2d {
public:
    Attention2d(const std::string& prefix, const AttentionBlockConfig& cfg, ParamStore& store,
                Rng& rng);

    /// Self-attention with a residual connection.
    Tensor self_forward(const Tensor& x, Tensor* attn_out = nullptr) const;
    /// Cross-attention: queries from query_src, keys/values from kv_src; the
    /// output keeps the query tensor's spatial layout. No residual.
    Tensor cross_forward(const Tensor& query_src, const Tensor& kv_src,
                         Tensor* attn_out = nullptr) const;

private:
    Tensor attend(const Tensor& query_src, const Tensor& kv_src, Tensor* attn_out) const;
    AttentionBlockConfig cfg_;
    int key_channels_;
    Tensor wq_, bq_, wk_, bk_, wv_, bv_;
};

struct CfamConfig {
    double scale = 0.5;
    int caption_heads = 4;
    double leaky_slope = 0.2;
    double ln_eps = 1e-5;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    int linear_fused_dim = 512;
};

/// Contextual feature aggregation: linear-fusion baseline, word-level context
/// modeling over local image features, caption-level multi-head attention
/// over the global feature, and the dense aggregation network.
class Cfam {
public:
    Cfam(const CfamConfig& cfg, ParamStore& store, Rng& rng);

    /// Concatenates the global feature and caption embedding (576) through
    /// one fully connected layer.
    Tensor linear_fusion(const Tensor& global512, const Tensor& caption64) const;

    /// Word-level context modeling: normalized/conditioned image branch,
    /// word-correlation query map, cross-attention, pooling; returns the
    /// flattened 1024-d context vector.
    Tensor word_level(const Tensor& words, const Tensor& local, bool use_norm,
                      bool use_selfattn, bool train);

    /// Caption-level context modeling: the caption embedding queries the
    /// global feature reshaped to 8 tokens through 4-head cross-attention.
    Tensor caption_level(const Tensor& caption64, const Tensor& global512) const;

    /// Aggregation network: concat(1024, 64) -> dense 768 with nonlinearity.
    Tensor aggregate(const Tensor& word_ctx, const Tensor& cap_ctx) const;

    /// Routes through exactly the sub-networks the ablation row enables.
    Tensor forward(CfamVariant variant, const ImageFeatures& image, const Tensor& words,
                   const Tensor& caption, bool train);

    /// Output embedding width of each ablation variant.
    int embedding_dim(CfamVariant variant) const;

    const CfamConfig& config() const { return cfg_; }

private:
    Tensor channel_layer_norm(const Tensor& x, const Tensor& g, const Tensor& b) const;

    CfamConfig cfg_;
    Tensor lf_w_, lf_b_;
    Tensor bn_g_, bn_b_;
    BatchNormState bn_;
    Tensor conv_w_, conv_b_;
    Attention2d self_attn_;
    Attention2d cross_attn_;
    Tensor ln1_g_, ln1_b_, ln2_g_, ln2_b_;
    Tensor cap_wq_, cap_wk_, cap_wv_, cap_wo_;
    Tensor ln3_g_, ln3_b_;
    Tensor fan_w_, fan_b_;
    Tensor word_head_w_, word_head_b_;
};

}  // namespace cgfr
