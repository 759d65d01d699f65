#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "crft/ops.hpp"
#include "crft/params.hpp"

// Layer helpers shared by the pipeline modules. Parameters are looked up by
// prefix in a ParamStore: "<prefix>.w" and "<prefix>.b".
namespace crft::nn {

using KeyMask = std::shared_ptr<const std::vector<std::uint8_t>>;

// Registration. Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
void add_dense(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
               std::mt19937_64& rng, bool bias = true);
void add_conv(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
              std::size_t k, std::mt19937_64& rng);
// Single-head pre-norm attention block of width c: query/key projections
// without bias, value projection and feed-forward output zero-initialized so
// the block starts as the identity.
void add_attention(ParamStore& ps, const std::string& prefix, std::size_t c, std::mt19937_64& rng);

Tensor dense(const ParamStore& ps, const std::string& prefix, const Tensor& x);
Tensor conv(const ParamStore& ps, const std::string& prefix, const Tensor& x, std::size_t stride,
            std::size_t padding);

// x [G,n,C] attends to src [G,m,C]:
//   x += softmax(LN(x)Wq (LN(src)Wk)^T / sqrt(C)) (LN(src)Wv + bv)
//   x += W2 gelu(W1 LN(x) + b1) + b2
// key_mask, when set, holds G*m flags; zero keys get no weight.
Tensor attention(const ParamStore& ps, const std::string& prefix, const Tensor& x, const Tensor& src,
                 const KeyMask& key_mask = nullptr);

// [1,C,H,W] <-> [1,H*W,C]
Tensor map_to_tokens(const Tensor& f);
Tensor tokens_to_map(const Tensor& t, std::size_t h, std::size_t w);

// [..., 1] -> [..., c] by repetition.
Tensor repeat_lastdim(const Tensor& x, std::size_t c);
// Sum over the last dimension scaled by `s`, keeping it as size 1.
Tensor sum_lastdim(const Tensor& x, double s = 1.0);

}  // namespace crft::nn
