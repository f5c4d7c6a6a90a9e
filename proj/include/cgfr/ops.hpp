#pragma once

#include <span>
#include <vector>

#include "cgfr/tensor.hpp"

namespace cgfr {

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
/// Elementwise max; on ties the gradient routes to `a`.
Tensor emax(const Tensor& a, const Tensor& b);
/// x if x >= 0 else slope * x.
Tensor leaky_relu(const Tensor& x, double slope);

// ---------------------------------------------------------------------------
// Shaping
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape dims);
Tensor transpose2d(const Tensor& x);
/// Rows [r0, r1) of a matrix.
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
/// Row i of a matrix as a rank-1 tensor.
Tensor row(const Tensor& x, int i);
Tensor concat_vec(const Tensor& a, const Tensor& b);
/// Stacks rank-1 tensors of equal length into a matrix, one per row.
Tensor stack_rows(std::span<const Tensor> rows);
/// Concatenates matrices with equal row counts along the column axis.
Tensor concat_cols(std::span<const Tensor> mats);
/// Assembles an m-by-n matrix from m*n scalar tensors in row-major order.
Tensor assemble_matrix(int m, int n, std::span<const Tensor> cells);
/// Zero padding of a C-by-H-by-W tensor along the spatial axes.
Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right);

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Row sums of a matrix, as a rank-1 tensor of length m.
Tensor row_sums(const Tensor& x);
/// Columnwise max over the rows of a matrix: [m x n] -> [n]. Ties route the
/// gradient to the lowest row index.
Tensor max_over_rows(const Tensor& x);
Tensor dot(const Tensor& a, const Tensor& b);
/// log(sum(exp(x))) of a rank-1 tensor, max-shifted.
Tensor logsumexp_vec(const Tensor& x);

// ---------------------------------------------------------------------------
// Linear algebra / NN primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// Adds a length-n vector to every row of an m-by-n matrix.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
/// Scales row i of an m-by-n matrix by v[i]; gradient flows to both inputs.
Tensor mul_colvec(const Tensor& x, const Tensor& v);

struct Conv2dSpec {
    int pad_h = 0, pad_w = 0;
    int stride_h = 1, stride_w = 1;
};
/// 2-d convolution of x [C x H x W] with weight [F x C x kh x kw] and bias
/// [F], zero padding. Output [F x H' x W'] with H' = (H + 2ph - kh)/sh + 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              const Conv2dSpec& spec);

/// Window max over a [C x H x W] tensor. Gradient goes to the first (lowest
/// flat index) maximum of each window.
Tensor maxpool2d(const Tensor& x, int k, int stride);

/// Rowwise softmax of a matrix, stabilized by row-max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Normalizes the last axis to unit L2 norm; vectors with norm below eps are
/// divided by eps instead.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

/// Running statistics and hyperparameters for one batch_norm site. The
/// running buffers are plain tensors updated in train mode and consumed in
/// eval mode.
struct BatchNormState {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    double momentum = 0.1;
    double eps = 1e-5;
};
/// Per-channel normalization of x [N x C x H x W]. Train mode uses batch
/// statistics over (N, H, W) and updates the running buffers; eval mode uses
/// the running buffers. Throws DegenerateStatsError when N*H*W < 2 in train
/// mode.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool train);

/// Normalization over the last axis (size d >= 2) with affine parameters.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

/// Rows of an embedding table selected by ids; gradient scatter-adds.
Tensor embed_rows(const Tensor& table, std::span<const int> ids);

/// Mean softmax cross-entropy of logits [N x C] against integer labels.
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> labels);

// Compositions used throughout the models.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}
/// x [k] * w [k x n] + b [n] -> [n].
Tensor affine_vec(const Tensor& x, const Tensor& w, const Tensor& b);
/// Cosine similarity of two rank-1 tensors with an eps guard on the norms.
inline Tensor cosine(const Tensor& a, const Tensor& b, double eps = 1e-12) {
    return dot(l2_normalize(a, eps), l2_normalize(b, eps));
}

}  // namespace cgfr
