#pragma once

#include <span>
#include <vector>

#include "cgfr/encoders.hpp"
#include "cgfr/optim.hpp"
#include "cgfr/ops.hpp"

namespace cgfr {

/// Word/caption embedding width shared by both modalities after projection.
constexpr int kEmbedDim = 64;

/// Batch-posterior sharpening temperatures for the alignment loss.
struct DamsmConfig {
    double gamma1 = 5.0;   // word-to-region attention
    double gamma2 = 5.0;   // relevance aggregation (log-sum-exp)
    double gamma3 = 10.0;  // batch posterior
};

/// One image-caption pair prepared for the alignment loss.
struct DamsmPair {
    Tensor regions;   // [196 x 64] projected local features, spatial-major
    Tensor words;     // [(L-1) x 64]
    Tensor caption;   // [64]
    Tensor global64;  // [64] projected global image feature
};

/// Textual feature refinement heads: the n-gram convolution projecting token
/// embeddings to word embeddings, the 1x1 projection of local image features,
/// the linear projection of the global feature, and the classifier weights of
/// the cross-modal projection loss.
class TfrmHeads {
public:
    TfrmHeads(int text_dim, int num_identities, ParamStore& store, Rng& rng,
              bool with_cls_head = false, double leaky_slope = 0.2, double eps = 1e-12);

    /// Uni/bi/tri-gram convolutions over the non-CLS rows of the token matrix,
    /// elementwise max across the three branches, per-row L2 normalization.
    /// [L x D] -> [(L-1) x 64].
    Tensor word_embeddings(const Tensor& tokens_out) const;

    /// Alternative caption embedding from the CLS token (config switch,
    /// default off): linear projection, feature normalization, L2 norm.
    /// Operates on a batch [N x D] so the normalization sees batch statistics.
    Tensor caption_embedding_cls(const Tensor& cls_batch, bool train);

    /// 1x1 convolution with leaky ReLU: [256 x 14 x 14] -> [64 x 14 x 14].
    Tensor project_local(const Tensor& local) const;
    /// Flattens a projected local map to region rows: [64 x 14 x 14] -> [196 x 64].
    static Tensor regions_of(const Tensor& projected);
    /// [512] -> [64].
    Tensor project_global(const Tensor& global) const;

    const Tensor& classifier() const { return w_cls_; }
    int num_identities() const { return num_identities_; }

private:
    int text_dim_;
    int num_identities_;
    double slope_;
    double eps_;
    Tensor conv_w_[3], conv_b_[3];  // kernel heights 1, 2, 3
    Tensor img_w_, img_b_;
    Tensor glob_w_, glob_b_;
    Tensor w_cls_;
    bool with_cls_head_;
    Tensor cls_w_, cls_b_, cls_g_, cls_beta_;
    BatchNormState cls_bn_;
};

/// Max-pool across word embedding rows followed by L2 normalization.
Tensor caption_embedding(const Tensor& word_embeddings, double eps = 1e-12);

/// Visual-semantic alignment loss over a batch of pairs: word-level
/// attention similarity and caption-level cosine similarity, each scored
/// against the batch posterior in both directions; the four terms (means
/// over the batch) are summed.
Tensor damsm_loss(std::span<const DamsmPair> batch, const DamsmConfig& cfg);

/// Image half of the projection loss: classify v projected onto the unit
/// text embedding. Invariant to the sign of the text embedding (the sign
/// cancels twice in the projection).
Tensor cmpc_loss_ipt(const Tensor& v_batch, const Tensor& c_batch,
                     std::span<const int> labels, const Tensor& w_cls, double eps = 1e-12);
/// Text half: classify c projected onto the unit image embedding.
Tensor cmpc_loss_tpi(const Tensor& v_batch, const Tensor& c_batch,
                     std::span<const int> labels, const Tensor& w_cls, double eps = 1e-12);
/// Cross-modal projection classification loss: classify each modality's
/// features after projecting onto the other modality's unit embedding; the
/// total is the sum of the two halves.
Tensor cmpc_loss(const Tensor& v_batch, const Tensor& c_batch,
                 std::span<const int> labels, const Tensor& w_cls, double eps = 1e-12);

/// Weighted combination of the two training losses.
inline Tensor tfrm_objective(const Tensor& damsm, const Tensor& cmpc, double lambda1,
                             double lambda2) {
    return add(scale(damsm, lambda1), scale(cmpc, lambda2));
}

}  // namespace cgfr
