#pragma once

#include "spiralscope/tensor.hpp"

#include <span>

namespace spiralscope {

// Differentiable primitives. Each op records itself on the active tape when
// a tape is active and at least one input requires grad; otherwise it runs
// forward only.
//
// Elementwise ops accept `b` with the same shape as `a`, a single value, or
// `a`'s shape with a leading extent of 1 (broadcast over the batch axis).

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// a * s for a constant s.
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s);

/// Sum of all elements, shape [1].
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a);

/// [m x k] x [k x n] -> [m x n].
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Cross-correlation of input [N x C x H x W] with kernel [F x C x kh x kw]
/// plus per-filter bias [F]. Output extent is (H + 2 pad - kh) / stride + 1,
/// which must divide exactly.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, Index stride, Index pad);

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x);

/// Mean over `window x window` patches placed every `stride` pixels.
template <typename Scalar>
Tensor<Scalar> avg_pool2d(const Tensor<Scalar>& x, Index window, Index stride);

/// [N x C x H x W] -> [N x C].
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x);

/// Mean over the batch of -log softmax(logits)[label], shape [1].
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels);

/// Row-wise softmax without tape recording.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits);

}  // namespace spiralscope
