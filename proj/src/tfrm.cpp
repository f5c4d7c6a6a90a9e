#include "cgfr/tfrm.hpp"

#include <cmath>

namespace cgfr {

TfrmHeads::TfrmHeads(int text_dim, int num_identities, ParamStore& store, Rng& rng,
                     bool with_cls_head, double leaky_slope, double eps)
    : text_dim_(text_dim),
      num_identities_(num_identities),
      slope_(leaky_slope),
      eps_(eps),
      with_cls_head_(with_cls_head) {
    for (int k = 0; k < 3; ++k) {
        int kh = k + 1;
        std::string p = "tfrm.conv" + std::to_string(kh) + "gram.";
        conv_w_[k] = store.add(p + "w", uniform_init({kEmbedDim, 1, kh, text_dim}, kh * text_dim, rng));
        conv_b_[k] = store.add(p + "b", Tensor::zeros({kEmbedDim}));
    }
    img_w_ = store.add("tfrm.imgproj.w", uniform_init({kEmbedDim, 256, 1, 1}, 256, rng));
    img_b_ = store.add("tfrm.imgproj.b", Tensor::zeros({kEmbedDim}));
    glob_w_ = store.add("tfrm.globproj.w", uniform_init({512, kEmbedDim}, 512, rng));
    glob_b_ = store.add("tfrm.globproj.b", Tensor::zeros({kEmbedDim}));
    w_cls_ = store.add("tfrm.cmpc.w", uniform_init({num_identities, kEmbedDim}, kEmbedDim, rng));
    if (with_cls_head_) {
        cls_w_ = store.add("tfrm.clshead.w", uniform_init({text_dim, kEmbedDim}, text_dim, rng));
        cls_b_ = store.add("tfrm.clshead.b", Tensor::zeros({kEmbedDim}));
        cls_g_ = store.add("tfrm.clshead.bn.g", Tensor::full({kEmbedDim}, 1.0));
        cls_beta_ = store.add("tfrm.clshead.bn.b", Tensor::zeros({kEmbedDim}));
        cls_bn_.running_mean = store.add_buffer("tfrm.clshead.bn.mean", Tensor::zeros({kEmbedDim}));
        cls_bn_.running_var = store.add_buffer("tfrm.clshead.bn.var", Tensor::full({kEmbedDim}, 1.0));
    }
}

Tensor TfrmHeads::word_embeddings(const Tensor& tokens_out) const {
    if (tokens_out.rank() != 2 || tokens_out.dim(0) != kTokenLen || tokens_out.dim(1) != text_dim_) {
        throw ShapeError("word_embeddings: expected [" + std::to_string(kTokenLen) + "x" +
                         std::to_string(text_dim_) + "], got " + shape_str(tokens_out.dims()));
    }
    int rows = kTokenLen - 1;
    // Drop the CLS row; the remaining sequence becomes a 1-channel 2-d map.
    Tensor words = reshape(slice_rows(tokens_out, 1, kTokenLen), {1, rows, text_dim_});

    // K=1 needs no padding; K=2 pads one trailing row; K=3 pads one on each
    // side. All keep the sequence length fixed.
    Tensor b1 = conv2d(words, conv_w_[0], conv_b_[0], {});
    Tensor b2 = conv2d(pad2d(words, 0, 1, 0, 0), conv_w_[1], conv_b_[1], {});
    Tensor b3 = conv2d(words, conv_w_[2], conv_b_[2], {.pad_h = 1});

    Tensor merged = emax(emax(b1, b2), b3);                       // [64 x rows x 1]
    Tensor per_word = transpose2d(reshape(merged, {kEmbedDim, rows}));  // [rows x 64]
    return l2_normalize(per_word, eps_);
}

Tensor TfrmHeads::caption_embedding_cls(const Tensor& cls_batch, bool train) {
    if (!with_cls_head_) throw ContractError("CLS caption head not enabled");
    if (cls_batch.rank() != 2 || cls_batch.dim(1) != text_dim_) {
        throw ShapeError("caption_embedding_cls: expected [N x D] CLS batch");
    }
    int n = cls_batch.dim(0);
    Tensor projected = linear(cls_batch, cls_w_, cls_b_);  // [N x 64]
    Tensor as_map = reshape(transpose2d(projected), {1, kEmbedDim, n, 1});
    Tensor normed = batch_norm(as_map, cls_g_, cls_beta_, cls_bn_, train && n >= 2);
    Tensor back = transpose2d(reshape(normed, {kEmbedDim, n}));
    return l2_normalize(back, eps_);
}

Tensor TfrmHeads::project_local(const Tensor& local) const {
    if (local.dims() != Shape{256, 14, 14}) {
        throw ShapeError("project_local: expected [256x14x14], got " + shape_str(local.dims()));
    }
    return leaky_relu(conv2d(local, img_w_, img_b_, {}), slope_);
}

Tensor TfrmHeads::regions_of(const Tensor& projected) {
    if (projected.rank() != 3 || projected.dim(0) != kEmbedDim) {
        throw ShapeError("regions_of: expected [64 x H x W], got " + shape_str(projected.dims()));
    }
    int hw = projected.dim(1) * projected.dim(2);
    return transpose2d(reshape(projected, {kEmbedDim, hw}));
}

Tensor TfrmHeads::project_global(const Tensor& global) const {
    if (global.dims() != Shape{512}) {
        throw ShapeError("project_global: expected [512], got " + shape_str(global.dims()));
    }
    return affine_vec(global, glob_w_, glob_b_);
}

Tensor caption_embedding(const Tensor& word_embeddings, double eps) {
    if (word_embeddings.rank() != 2 || word_embeddings.dim(0) < 1) {
        throw ShapeError("caption_embedding: expected a non-empty word matrix");
    }
    return l2_normalize(max_over_rows(word_embeddings), eps);
}

namespace {

// Word-level relevance of one image-caption combination: word-to-region
// attention sharpened by gamma1, cosine relevance of each word to its region
// context, aggregated by a gamma2 log-sum-exp.
Tensor word_level_score(const Tensor& regions, const Tensor& words, const DamsmConfig& cfg) {
    Tensor sim = matmul(words, transpose2d(regions));  // [words x regions]
    // Normalize across words for each region, then attend across regions for
    // each word.
    Tensor norm_words = transpose2d(softmax_rows(transpose2d(sim)));
    Tensor attn = softmax_rows(scale(norm_words, cfg.gamma1));
    Tensor context = matmul(attn, regions);  // [words x 64]
    Tensor relevance = row_sums(mul(l2_normalize(context), l2_normalize(words)));
    return scale(logsumexp_vec(scale(relevance, cfg.gamma2)), 1.0 / cfg.gamma2);
}

Tensor posterior_terms(const Tensor& sim_matrix, double gamma3, std::span<const int> diag) {
    Tensor scaled = scale(sim_matrix, gamma3);
    Tensor img_to_text = cross_entropy_rows(scaled, diag);
    Tensor text_to_img = cross_entropy_rows(transpose2d(scaled), diag);
    return add(img_to_text, text_to_img);
}

}  // namespace

Tensor damsm_loss(std::span<const DamsmPair> batch, const DamsmConfig& cfg) {
    int n = static_cast<int>(batch.size());
    if (n < 1) throw InputError("damsm_loss: empty batch");
    std::vector<Tensor> word_cells, cap_cells;
    word_cells.reserve(static_cast<std::size_t>(n) * n);
    cap_cells.reserve(static_cast<std::size_t>(n) * n);
    for (int i = 0; i < n; ++i) {      // image index
        for (int j = 0; j < n; ++j) {  // caption index
            word_cells.push_back(word_level_score(batch[i].regions, batch[j].words, cfg));
            cap_cells.push_back(cosine(batch[i].global64, batch[j].caption));
        }
    }
    Tensor word_sim = assemble_matrix(n, n, word_cells);
    Tensor cap_sim = assemble_matrix(n, n, cap_cells);
    std::vector<int> diag(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) diag[static_cast<std::size_t>(i)] = i;
    return add(posterior_terms(word_sim, cfg.gamma3, diag),
               posterior_terms(cap_sim, cfg.gamma3, diag));
}

namespace {

void check_cmpc_inputs(const Tensor& v_batch, const Tensor& c_batch,
                       std::span<const int> labels, const Tensor& w_cls) {
    if (v_batch.rank() != 2 || c_batch.rank() != 2 || v_batch.dims() != c_batch.dims()) {
        throw ShapeError("cmpc_loss: feature batches must both be [N x 64]");
    }
    int n = v_batch.dim(0);
    if (n < 1) throw InputError("cmpc_loss: empty batch");
    if (static_cast<int>(labels.size()) != n) throw ShapeError("cmpc_loss: label count mismatch");
    int classes = w_cls.dim(0);
    for (int y : labels) {
        if (y < 0 || y >= classes) {
            throw InputError("cmpc_loss: label " + std::to_string(y) + " outside [0, " +
                             std::to_string(classes) + ")");
        }
    }
}

// Projects `feats` onto the unit-normalized anchors row by row and scores the
// projected vectors with a plain softmax over the classifier weights.
Tensor projection_ce(const Tensor& feats, const Tensor& anchors, std::span<const int> labels,
                     const Tensor& w_cls, double eps) {
    Tensor anchor_bar = l2_normalize(anchors, eps);
    Tensor projected = mul_colvec(anchor_bar, row_sums(mul(feats, anchor_bar)));
    return cross_entropy_rows(matmul(projected, transpose2d(w_cls)), labels);
}

}  // namespace

Tensor cmpc_loss_ipt(const Tensor& v_batch, const Tensor& c_batch, std::span<const int> labels,
                     const Tensor& w_cls, double eps) {
    check_cmpc_inputs(v_batch, c_batch, labels, w_cls);
    return projection_ce(v_batch, c_batch, labels, w_cls, eps);
}

Tensor cmpc_loss_tpi(const Tensor& v_batch, const Tensor& c_batch, std::span<const int> labels,
                     const Tensor& w_cls, double eps) {
    check_cmpc_inputs(v_batch, c_batch, labels, w_cls);
    return projection_ce(c_batch, v_batch, labels, w_cls, eps);
}

Tensor cmpc_loss(const Tensor& v_batch, const Tensor& c_batch, std::span<const int> labels,
                 const Tensor& w_cls, double eps) {
    return add(cmpc_loss_ipt(v_batch, c_batch, labels, w_cls, eps),
               cmpc_loss_tpi(v_batch, c_batch, labels, w_cls, eps));
}

}  // namespace cgfr
