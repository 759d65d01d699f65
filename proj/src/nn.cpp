#include "crft/nn.hpp"

#include <cmath>

#include "crft/error.hpp"

namespace crft::nn {

void add_dense(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
               std::mt19937_64& rng, bool bias) {
  ps.add_uniform(prefix + ".w", {out, in}, in, rng);
  if (bias) ps.add_zeros(prefix + ".b", {out});
}

void add_conv(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out,
              std::size_t k, std::mt19937_64& rng) {
  ps.add_uniform(prefix + ".w", {out, in, k, k}, in * k * k, rng);
  ps.add_zeros(prefix + ".b", {out});
}

void add_attention(ParamStore& ps, const std::string& prefix, std::size_t c, std::mt19937_64& rng) {
  add_dense(ps, prefix + ".q", c, c, rng, false);
  add_dense(ps, prefix + ".k", c, c, rng, false);
  ps.add_zeros(prefix + ".v.w", {c, c});
  ps.add_zeros(prefix + ".v.b", {c});
  add_dense(ps, prefix + ".ff1", c, 2 * c, rng);
  ps.add_zeros(prefix + ".ff2.w", {c, 2 * c});
  ps.add_zeros(prefix + ".ff2.b", {c});
}

Tensor dense(const ParamStore& ps, const std::string& prefix, const Tensor& x) {
  const std::string b = prefix + ".b";
  return linear(x, ps.get(prefix + ".w"), ps.contains(b) ? ps.get(b) : Tensor());
}

Tensor conv(const ParamStore& ps, const std::string& prefix, const Tensor& x, std::size_t stride,
            std::size_t padding) {
  return conv2d(x, ps.get(prefix + ".w"), ps.get(prefix + ".b"), stride, padding);
}

Tensor attention(const ParamStore& ps, const std::string& prefix, const Tensor& x, const Tensor& src,
                 const KeyMask& key_mask) {
  if (x.dim() != 3 || src.dim() != 3) {
    throw ShapeError("attention: expected [G,n,C] tokens, got " + shape_str(x.shape()) + " and " +
                     shape_str(src.shape()));
  }
  if (x.size(0) != src.size(0) || x.size(2) != src.size(2)) {
    throw ShapeError("attention: query " + shape_str(x.shape()) + " and source " +
                     shape_str(src.shape()) + " disagree in group count or channel width");
  }
  const std::size_t g = x.size(0), n = x.size(1), m = src.size(1), c = x.size(2);
  const Tensor xn = layer_norm_lastdim(x);
  const Tensor sn = layer_norm_lastdim(src);
  const Tensor q = dense(ps, prefix + ".q", xn);
  const Tensor k = dense(ps, prefix + ".k", sn);
  const Tensor v = dense(ps, prefix + ".v", sn);
  Tensor scores = scale(matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(c)));
  Tensor a;
  if (key_mask) {
    a = reshape(masked_softmax_lastdim(reshape(scores, {g * n, m}), key_mask, n), {g, n, m});
  } else {
    a = softmax_lastdim(scores);
  }
  Tensor y = add(x, matmul(a, v));
  Tensor h = gelu(dense(ps, prefix + ".ff1", layer_norm_lastdim(y)));
  return add(y, dense(ps, prefix + ".ff2", h));
}

Tensor map_to_tokens(const Tensor& f) {
  if (f.dim() != 4 || f.size(0) != 1) throw ShapeError("expected a [1,C,H,W] map, got " + shape_str(f.shape()));
  const std::size_t c = f.size(1), hw = f.size(2) * f.size(3);
  return reshape(permute(reshape(f, {c, hw}), {1, 0}), {1, hw, c});
}

Tensor tokens_to_map(const Tensor& t, std::size_t h, std::size_t w) {
  if (t.dim() != 3 || t.size(0) != 1 || t.size(1) != h * w) {
    throw ShapeError("expected [1," + std::to_string(h * w) + ",C] tokens, got " + shape_str(t.shape()));
  }
  const std::size_t c = t.size(2);
  return reshape(permute(reshape(t, {h * w, c}), {1, 0}), {1, c, h, w});
}

Tensor repeat_lastdim(const Tensor& x, std::size_t c) {
  if (x.dim() == 0 || x.shape().back() != 1) {
    throw ShapeError("repeat_lastdim: last dimension must be 1, got " + shape_str(x.shape()));
  }
  auto idx = std::make_shared<std::vector<std::int64_t>>(x.numel() * c);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    for (std::size_t j = 0; j < c; ++j) (*idx)[i * c + j] = static_cast<std::int64_t>(i);
  }
  Shape s = x.shape();
  s.back() = c;
  return gather(x, idx, std::move(s));
}

Tensor sum_lastdim(const Tensor& x, double s) {
  const std::size_t c = x.shape().back();
  Tensor ones(Shape{1, c}, s);
  return linear(x, ones, Tensor());
}

}  // namespace crft::nn
