#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "r2r/tensor.hpp"

// Raw numeric kernels shared by the differentiation engine, plain inference
// and relevance propagation. All image tensors are NCHW.
namespace r2r::kernels {

inline float softplus(float v) { return std::max(v, 0.0f) + std::log1p(std::exp(-std::fabs(v))); }

struct ConvGeometry {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad);
std::size_t pool_out_size(std::size_t in, std::size_t kernel, std::size_t stride);

// C = op(A) * op(B) for 2-D tensors.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b);

Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g);
// Adjoint of conv2d w.r.t. its input.
Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, ConvGeometry g,
                         const Shape& in_shape);
// Adjoint of conv2d w.r.t. its weights.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, ConvGeometry g,
                          const Shape& w_shape);

// Flat argmax indices into x for every pooled output element (first max wins).
std::vector<std::uint32_t> maxpool_indices(const Tensor& x, std::size_t kernel,
                                           std::size_t stride, Shape* out_shape);
Tensor gather(const Tensor& x, const std::vector<std::uint32_t>& idx, const Shape& out_shape);
Tensor scatter_add(const Tensor& g, const std::vector<std::uint32_t>& idx, const Shape& in_shape);

Tensor avgpool(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor avgpool_transpose(const Tensor& g, std::size_t kernel, std::size_t stride,
                         const Shape& in_shape);

// Broadcast v[C] along axis 1 of `shape`; and its adjoint.
Tensor channel_broadcast(const Tensor& v, const Shape& shape);
Tensor channel_sum(const Tensor& x);

// Per-row (last axis of a 2-D tensor) softmax / log-softmax.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
// Each row replaced by its sum, broadcast back over the row.
Tensor row_sum_broadcast(const Tensor& x);

}  // namespace r2r::kernels
