#pragma once

#include <vector>

#include "neft/autograd.hpp"
#include "neft/tensor.hpp"

// Differentiable tensor operations. Every function records a backward rule on
// the active tape when any input requires a gradient.

namespace neft {

// --- linear algebra -------------------------------------------------------

/// Batched matrix product a[..., m, k] * b[..., k, n] with numpy-style
/// broadcasting over the batch extents.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// a[..., m, k] * b[..., n, k]^T without materializing the transpose.
template <typename Scalar>
Tensor<Scalar> matmul_transposed(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// --- elementwise ----------------------------------------------------------
// Binary ops accept equal shapes or a trailing-suffix broadcast, e.g.
// [B, N, C] + [C] or [B, h, N, N] + [h, N, N].

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);
/// Exact (erf-based) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x);

// --- normalization --------------------------------------------------------

/// Max-subtracted softmax along `axis`.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis = -1);

/// Normalizes over the last axis, then applies gain and bias of that extent.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5));

/// Running statistics owned by a batch-norm layer.
template <typename Scalar>
struct BatchNormStats {
  Tensor<Scalar> mean;
  Tensor<Scalar> var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);
};

/// Per-channel normalization of x[B, C, ...]. In training mode normalizes with
/// batch statistics and updates `stats`; otherwise uses the frozen stats.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, BatchNormStats<Scalar>& stats,
                          bool training);

// --- convolution ----------------------------------------------------------

/// Cross-correlation of x[B, C_in, H, W] (or unbatched [C_in, H, W]) with
/// kernel[C_out, C_in, K_h, K_w]. `bias` may be undefined.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, Index stride, Index padding);

/// Transposed convolution with kernel[C_in, C_out, k, k] where k == stride:
/// exact upsampling by `stride`, no padding.
template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                                const Tensor<Scalar>& bias, Index stride);

// --- shape ----------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape);

/// Collapses axes [start_axis, rank) into one.
template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x, Index start_axis = 1);

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<Index>& order);

/// out[..., j] = table[..., indices[j]].
template <typename Scalar>
Tensor<Scalar> index_select(const Tensor<Scalar>& table, const std::vector<Index>& indices);

// --- reductions -----------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x);
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x);

/// Mean of squared differences over all elements.
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

// --- operators ------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mul(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) {
  return scale(a, s);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) {
  return scale(a, s);
}

}  // namespace neft
