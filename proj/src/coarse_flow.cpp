#include "crft/coarse_flow.hpp"

#include <cmath>

#include "crft/error.hpp"
#include "crft/nn.hpp"
#include "crft/ops.hpp"

namespace crft {

Tensor positional_encoding_table(std::size_t c, std::size_t h, std::size_t w) {
  if (c == 0 || c % 2 != 0) {
    throw ShapeError("positional encoding needs an even channel count, got " + std::to_string(c));
  }
  std::vector<double> v(c * h * w);
  for (std::size_t k = 0; k < c / 2; ++k) {
    const double f = static_cast<double>(k / 2);
    const double omega = 1.0 / std::pow(10000.0, 2.0 * f / static_cast<double>(c));
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double pos = static_cast<double>(k % 2 == 0 ? x : y);
        v[((2 * k) * h + y) * w + x] = std::sin(omega * pos);
        v[((2 * k + 1) * h + y) * w + x] = std::cos(omega * pos);
      }
    }
  }
  return Tensor(Shape{1, c, h, w}, std::move(v));
}

Tensor add_positional_encoding(const Tensor& f) {
  if (f.dim() != 4 || f.size(0) != 1) {
    throw ShapeError("add_positional_encoding: expected [1,C,H,W], got " + shape_str(f.shape()));
  }
  return add(f, positional_encoding_table(f.size(1), f.size(2), f.size(3)));
}

void add_coarse_params(ParamStore& ps, std::size_t c, std::size_t layers, double proj_gain,
                       std::mt19937_64& rng) {
  for (std::size_t l = 0; l < layers; ++l) {
    nn::add_attention(ps, "coarse.sa" + std::to_string(l), c, rng);
    nn::add_attention(ps, "coarse.ca" + std::to_string(l), c, rng);
  }
  std::vector<double> eye(c * c, 0.0);
  for (std::size_t i = 0; i < c; ++i) eye[i * c + i] = proj_gain;
  ps.add("coarse.proj.w", Tensor(Shape{c, c}, std::move(eye)));
  ps.add_zeros("coarse.proj.b", {c});
}

std::pair<Tensor, Tensor> sa_ca_stack(const Tensor& fa, const Tensor& fb, const ParamStore& ps,
                                      std::size_t layers) {
  if (fa.dim() != 4 || fb.dim() != 4 || fa.size(1) != fb.size(1)) {
    throw ShapeError("sa_ca_stack: channel mismatch between " + shape_str(fa.shape()) + " and " +
                     shape_str(fb.shape()));
  }
  Tensor ta = nn::map_to_tokens(fa);
  Tensor tb = nn::map_to_tokens(fb);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string sa = "coarse.sa" + std::to_string(l);
    const std::string ca = "coarse.ca" + std::to_string(l);
    ta = nn::attention(ps, sa, ta, ta);
    tb = nn::attention(ps, sa, tb, tb);
    Tensor na = nn::attention(ps, ca, ta, tb);
    Tensor nb = nn::attention(ps, ca, tb, ta);
    ta = na;
    tb = nb;
  }
  return {nn::tokens_to_map(ta, fa.size(2), fa.size(3)), nn::tokens_to_map(tb, fb.size(2), fb.size(3))};
}

Tensor project_normalize(const Tensor& f, const Tensor& w, const Tensor& b) {
  if (f.dim() != 4 || f.size(0) != 1) {
    throw ShapeError("project_normalize: expected [1,C,H,W], got " + shape_str(f.shape()));
  }
  const std::size_t c = f.size(1);
  if (w.dim() != 2 || w.size(0) != c || w.size(1) != c) {
    throw ShapeError("project_normalize: W_proj must be " + std::to_string(c) + "x" +
                     std::to_string(c) + ", got " + shape_str(w.shape()));
  }
  Tensor t = linear(nn::map_to_tokens(f), w, b);
  return nn::tokens_to_map(scale(t, 1.0 / std::sqrt(static_cast<double>(c))), f.size(2), f.size(3));
}

CorrelationVolume global_correlation(const Tensor& fa_hat, const Tensor& fb_hat) {
  if (fa_hat.dim() != 4 || fb_hat.dim() != 4 || fa_hat.size(1) != fb_hat.size(1)) {
    throw ShapeError("global_correlation: channel widths differ (" + shape_str(fa_hat.shape()) +
                     " vs " + shape_str(fb_hat.shape()) + ")");
  }
  CorrelationVolume vol;
  vol.ha = fa_hat.size(2);
  vol.wa = fa_hat.size(3);
  vol.hb = fb_hat.size(2);
  vol.wb = fb_hat.size(3);
  const std::size_t c = fa_hat.size(1);
  Tensor a = reshape(fa_hat, {c, vol.ha * vol.wa});
  Tensor b = reshape(fb_hat, {c, vol.hb * vol.wb});
  vol.values = matmul(a, b, true, false);
  return vol;
}

Tensor coarse_flow_from_correlation(CorrelationVolume& vol) {
  if (!vol.values.defined()) throw ShapeError("coarse_flow_from_correlation: empty volume");
  vol.probs = softmax_lastdim(vol.values);
  const std::size_t na = vol.ha * vol.wa, nb = vol.hb * vol.wb;
  std::vector<double> gb(nb * 2), ga(na * 2);
  for (std::size_t q = 0; q < nb; ++q) {
    gb[q * 2] = static_cast<double>(q % vol.wb);
    gb[q * 2 + 1] = static_cast<double>(q / vol.wb);
  }
  for (std::size_t p = 0; p < na; ++p) {
    ga[p * 2] = static_cast<double>(p % vol.wa);
    ga[p * 2 + 1] = static_cast<double>(p / vol.wa);
  }
  Tensor target = matmul(vol.probs, Tensor(Shape{nb, 2}, std::move(gb)));
  Tensor flow = sub(target, Tensor(Shape{na, 2}, std::move(ga)));
  return reshape(permute(flow, {1, 0}), {1, 2, vol.ha, vol.wa});
}

Tensor estimate_coarse_flow(const Tensor& fa8, const Tensor& fb8, const ParamStore& ps,
                            std::size_t layers, CorrelationVolume* volume_out) {
  auto [ta, tb] = sa_ca_stack(add_positional_encoding(fa8), add_positional_encoding(fb8), ps, layers);
  const Tensor& w = ps.get("coarse.proj.w");
  const Tensor& b = ps.get("coarse.proj.b");
  CorrelationVolume vol = global_correlation(project_normalize(ta, w, b), project_normalize(tb, w, b));
  Tensor flow = coarse_flow_from_correlation(vol);
  if (volume_out) *volume_out = std::move(vol);
  return flow;
}

}  // namespace crft
