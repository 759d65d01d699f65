#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "crft/tensor.hpp"

// Differentiable primitives. Every learnable layer is composed from these;
// each one has a hand-written backward rule checked against finite
// differences in tests/tensor_ops_test.cpp.
namespace crft {

// Flat element index table shared between forward and backward of
// gather/scatter_add. Entries equal to -1 read as zero (gather) or are
// dropped (scatter_add).
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
// x * s where s holds exactly one (differentiable) value.
Tensor scale_by(const Tensor& x, const Tensor& s);

Tensor relu(const Tensor& x);
// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);

// Full reductions to a single-element tensor of shape [1].
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor l1_norm(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor concat(const std::vector<Tensor>& parts, std::size_t dim);

// out.flat[i] = index[i] < 0 ? 0 : x.flat[index[i]]
Tensor gather(const Tensor& x, const IndexMap& index, Shape out_shape);
// out.flat[index[i]] += x.flat[i] for index[i] >= 0. Adjoint of gather.
Tensor scatter_add(const Tensor& x, const IndexMap& index, Shape out_shape);

// y[..., o] = sum_i w[o, i] x[..., i] + b[o]. `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// 2-D [M,K]x[K,N] or batched 3-D [B,M,K]x[B,K,N], with optional transposes
// applied to the trailing two dimensions.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a = false,
              bool transpose_b = false);

// Softmax over the last dimension with max subtraction.
Tensor softmax_lastdim(const Tensor& x);

// Softmax over the last dimension where keys with key_mask == 0 receive
// exactly zero weight. Rows are grouped: row r uses mask slice
// r / rows_per_group, each slice holding one flag per key.
Tensor masked_softmax_lastdim(const Tensor& x,
                              std::shared_ptr<const std::vector<std::uint8_t>> key_mask,
                              std::size_t rows_per_group);

// (x - mean) / sqrt(var + eps) over the last dimension, no affine terms.
Tensor layer_norm_lastdim(const Tensor& x, double eps = 1e-5);

// Cross-correlation. x [N,Cin,H,W], w [Cout,Cin,kh,kw] with odd kh,kw,
// b [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding);

// Bilinear lookup of `map` [N,C,H,W] at absolute pixel positions `coords`
// [M,2,h,w] (channel 0 = x, channel 1 = y). N must equal M, or be 1 for a
// map shared by all M items. Positions are clamped to the map extent; when
// `out_of_bounds` is given it receives one flag per [M,h,w] position that
// lay outside [0,W-1]x[0,H-1] before clamping.
Tensor bilinear_sample(const Tensor& map, const Tensor& coords,
                       std::vector<std::uint8_t>* out_of_bounds = nullptr);

// Bilinear resize of [N,C,H,W] with pixel-centre alignment:
// src = (dst + 0.5) * in / out - 0.5, clamped to the input extent.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Per-row min-max rescale of a [R,n] tensor into [0,1]. Rows whose range is
// below 1e-12 map to all zeros.
Tensor minmax_normalize_rows(const Tensor& x);

}  // namespace crft
