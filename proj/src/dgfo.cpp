#include "crft/dgfo.hpp"

#include <cmath>

#include "crft/error.hpp"
#include "crft/ops.hpp"

namespace crft {

namespace {

std::size_t window_side(std::size_t n) {
  const auto s = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
  if (s * s != n) throw ShapeError("window token count " + std::to_string(n) + " is not a square");
  return s;
}

// [K,n,X] -> [K,X,s,s]
Tensor tokens_to_patches(const Tensor& x) {
  const std::size_t k = x.size(0), n = x.size(1), c = x.size(2), s = window_side(n);
  return reshape(permute(x, {0, 2, 1}), {k, c, s, s});
}

// [K,X,s,s] -> [K,s*s,X]
Tensor patches_to_tokens(const Tensor& x) {
  const std::size_t k = x.size(0), c = x.size(1), n = x.size(2) * x.size(3);
  return permute(reshape(x, {k, c, n}), {0, 2, 1});
}

// [K,n,2] -> [1,2,K,n]
Tensor flow_to_coords(const Tensor& flow) {
  const std::size_t k = flow.size(0), n = flow.size(1);
  return reshape(permute(flow, {2, 0, 1}), {1, 2, k, n});
}

Tensor window_grid(const WindowLayout& l) {
  const std::size_t n = l.half_x.size();
  std::vector<double> v(2 * n);
  std::copy(l.half_x.begin(), l.half_x.end(), v.begin());
  std::copy(l.half_y.begin(), l.half_y.end(), v.begin() + static_cast<std::ptrdiff_t>(n));
  return Tensor(Shape{1, 2, l.k, n / l.k}, std::move(v));
}

// [1,C,K,n] sample output -> [K,n,C]
Tensor samples_to_tokens(const Tensor& s) {
  const std::size_t c = s.size(1), k = s.size(2), n = s.size(3);
  return reshape(permute(s, {0, 2, 3, 1}), {k, n, c});
}

// scatter-add of window tokens [K,n,C] onto the 1/2 lattice [1,C,H2,W2]
Tensor fold_windows(const Tensor& x, const WindowLayout& l) {
  const std::size_t k = x.size(0), n = x.size(1), c = x.size(2);
  if (k * n != l.half.size()) throw ShapeError("fold_windows: token count does not match the layout");
  const auto plane = static_cast<std::int64_t>(l.h2 * l.w2);
  auto idx = std::make_shared<std::vector<std::int64_t>>(k * n * c);
  for (std::size_t i = 0; i < k * n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      (*idx)[i * c + ch] = l.half[i] < 0 ? -1 : static_cast<std::int64_t>(ch) * plane + l.half[i];
    }
  }
  return scatter_add(x, idx, {1, c, l.h2, l.w2});
}

Tensor mask_tokens(const WindowLayout& l) {
  std::vector<double> v(l.half.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = l.half[i] >= 0 ? 1.0 : 0.0;
  return Tensor(Shape{l.k, l.half.size() / l.k, 1}, std::move(v));
}

Tensor inverse_coverage(const WindowLayout& l, std::size_t channels) {
  std::vector<double> v(channels * l.coverage.size());
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < l.coverage.size(); ++i) {
      v[c * l.coverage.size() + i] = 1.0 / std::max(l.coverage[i], 1.0);
    }
  }
  return Tensor(Shape{1, channels, l.h2, l.w2}, std::move(v));
}

void add_identity_conv(ParamStore& ps, const std::string& prefix, double gain) {
  std::vector<double> w(2 * 2 * 3 * 3, 0.0);
  w[(0 * 2 + 0) * 9 + 4] = gain;
  w[(1 * 2 + 1) * 9 + 4] = gain;
  ps.add(prefix + ".w", Tensor(Shape{2, 2, 3, 3}, std::move(w)));
  ps.add_zeros(prefix + ".b", {2});
}

Tensor layer_norm_map(const Tensor& map) {
  return nn::tokens_to_map(layer_norm_lastdim(nn::map_to_tokens(map)), map.size(2), map.size(3));
}

}  // namespace

void add_dgfo_params(ParamStore& ps, const DgfoConfig& cfg, std::mt19937_64& rng) {
  nn::add_dense(ps, "dgfo.fsft1", cfg.cf, cfg.cf, rng);
  nn::add_dense(ps, "dgfo.fsft2", cfg.cf, cfg.cf, rng);
  nn::add_dense(ps, "dgfo.wq", cfg.cf, cfg.cf, rng, false);
  nn::add_dense(ps, "dgfo.wk", cfg.cf, cfg.cf, rng, false);
  nn::add_conv(ps, "dgfo.res1", cfg.residual_inputs(), cfg.residual_width, 1, rng);
  nn::add_conv(ps, "dgfo.res2", cfg.residual_width, cfg.residual_width, 3, rng);
  ps.add_zeros("dgfo.res3.w", {2, cfg.residual_width, 3, 3});
  ps.add_zeros("dgfo.res3.b", {2});
  nn::add_conv(ps, "dgfo.ce1", cfg.cenet_inputs(), cfg.cenet_width, 3, rng);
  ps.add_zeros("dgfo.ce2.w", {1, cfg.cenet_width, 3, 3});
  ps.add_zeros("dgfo.ce2.b", {1});
  add_identity_conv(ps, "dgfo.smooth1", 2.0);
  add_identity_conv(ps, "dgfo.smooth2", 1.0);
  ps.add_zeros("dgfo.alpha", {1});
}

Tensor fsft(const Tensor& x, const ParamStore& ps) {
  return nn::dense(ps, "dgfo.fsft2", gelu(nn::dense(ps, "dgfo.fsft1", x)));
}

Tensor sgt_warp(const Tensor& f, const Tensor& flow, std::vector<std::uint8_t>* out_of_bounds) {
  if (f.dim() != 4 || flow.dim() != 4 || flow.size(1) != 2 || flow.size(0) != f.size(0) ||
      flow.size(2) != f.size(2) || flow.size(3) != f.size(3)) {
    throw ShapeError("sgt_warp: flow " + shape_str(flow.shape()) + " is not on the lattice of " +
                     shape_str(f.shape()));
  }
  const std::size_t n = f.size(0), h = f.size(2), w = f.size(3);
  std::vector<double> grid(n * 2 * h * w);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        grid[((b * 2) * h + y) * w + x] = static_cast<double>(x);
        grid[((b * 2 + 1) * h + y) * w + x] = static_cast<double>(y);
      }
    }
  }
  return bilinear_sample(f, add(Tensor(flow.shape(), std::move(grid)), flow), out_of_bounds);
}

Tensor warp_windows(const Tensor& map, const WindowLayout& layout, const Tensor& flow) {
  return samples_to_tokens(bilinear_sample(map, add(window_grid(layout), flow_to_coords(flow))));
}

Discrepancy feature_discrepancy(const Tensor& fa, const Tensor& fb_warped) {
  if (fa.shape() != fb_warped.shape() || fa.dim() < 2) {
    throw ShapeError("feature_discrepancy: shapes " + shape_str(fa.shape()) + " and " +
                     shape_str(fb_warped.shape()) + " are not aligned");
  }
  const std::size_t k = fa.size(0);
  Discrepancy d;
  d.delta = reshape(minmax_normalize_rows(reshape(abs(sub(fa, fb_warped)), {k, fa.numel() / k})),
                    fa.shape());
  d.f_attn = add_scalar(scale(d.delta, -1.0), 1.0);
  return d;
}

Tensor discrepancy_attention(const Tensor& f_attn, const Tensor& flow, const Tensor& wq,
                             const Tensor& wk, const nn::KeyMask& key_mask) {
  if (f_attn.dim() != 3 || flow.dim() != 3 || flow.size(2) != 2 || f_attn.size(0) != flow.size(0) ||
      f_attn.size(1) != flow.size(1)) {
    throw ShapeError("discrepancy_attention: f_attn " + shape_str(f_attn.shape()) + " and flow " +
                     shape_str(flow.shape()) + " disagree");
  }
  const std::size_t k = f_attn.size(0), n = f_attn.size(1), c = f_attn.size(2);
  Tensor q = linear(f_attn, wq, Tensor());
  Tensor kk = linear(f_attn, wk, Tensor());
  Tensor scores = scale(matmul(q, kk, false, true), 1.0 / std::sqrt(static_cast<double>(c)));
  Tensor a = key_mask ? reshape(masked_softmax_lastdim(reshape(scores, {k * n, n}), key_mask, n), {k, n, n})
                      : softmax_lastdim(scores);
  return matmul(a, flow);
}

Tensor local_cost(const Tensor& fa_normed, const Tensor& map_normed, const WindowLayout& layout,
                  const Tensor& flow, std::size_t radius) {
  const std::size_t k = fa_normed.size(0), n = fa_normed.size(1), c = fa_normed.size(2);
  const std::size_t side = 2 * radius + 1, d = side * side;
  // Every window position repeated once per offset, offsets added as a constant.
  Tensor coords = add(window_grid(layout), flow_to_coords(flow));
  auto rep = std::make_shared<std::vector<std::int64_t>>(2 * k * n * d);
  std::vector<double> offs(2 * k * n * d);
  for (std::size_t ch = 0; ch < 2; ++ch) {
    for (std::size_t i = 0; i < k * n; ++i) {
      for (std::size_t o = 0; o < d; ++o) {
        const std::size_t dst = (ch * k * n + i) * d + o;
        (*rep)[dst] = static_cast<std::int64_t>(ch * k * n + i);
        const double dy = static_cast<double>(o / side) - static_cast<double>(radius);
        const double dx = static_cast<double>(o % side) - static_cast<double>(radius);
        offs[dst] = ch == 0 ? dx : dy;
      }
    }
  }
  Tensor all = add(gather(coords, rep, {1, 2, k, n * d}), Tensor(Shape{1, 2, k, n * d}, std::move(offs)));
  Tensor sampled = reshape(samples_to_tokens(bilinear_sample(map_normed, all)), {k, n, d, c});
  auto frep = std::make_shared<std::vector<std::int64_t>>(k * n * d * c);
  for (std::size_t i = 0; i < k * n; ++i) {
    for (std::size_t o = 0; o < d; ++o) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        (*frep)[(i * d + o) * c + ch] = static_cast<std::int64_t>(i * c + ch);
      }
    }
  }
  Tensor fa_rep = gather(fa_normed, frep, {k, n, d, c});
  return reshape(nn::sum_lastdim(mul(fa_rep, sampled), 1.0 / static_cast<double>(c)), {k, n, d});
}

Tensor residual_update(const Tensor& flow, const Tensor& features, const ParamStore& ps) {
  Tensor x = tokens_to_patches(concat({flow, features}, 2));
  Tensor h = relu(nn::conv(ps, "dgfo.res1", x, 1, 0));
  h = relu(nn::conv(ps, "dgfo.res2", h, 1, 1));
  Tensor delta = patches_to_tokens(nn::conv(ps, "dgfo.res3", h, 1, 1));
  return add(flow, delta);
}

Tensor cenet(const Tensor& inputs, const ParamStore& ps) {
  Tensor h = relu(nn::conv(ps, "dgfo.ce1", tokens_to_patches(inputs), 1, 1));
  return patches_to_tokens(sigmoid(nn::conv(ps, "dgfo.ce2", h, 1, 1)));
}

Aggregate aggregate_windows(const Tensor& flow, const Tensor& confidence, const WindowLayout& layout) {
  if (flow.dim() != 3 || flow.size(2) != 2 || confidence.dim() != 3 || confidence.size(2) != 1 ||
      confidence.size(0) != flow.size(0) || confidence.size(1) != flow.size(1)) {
    throw ShapeError("aggregate_windows: flow " + shape_str(flow.shape()) + " and confidence " +
                     shape_str(confidence.shape()) + " disagree");
  }
  Tensor c = mul(confidence, mask_tokens(layout));
  Tensor den = fold_windows(c, layout);
  Tensor num = fold_windows(mul(flow, nn::repeat_lastdim(c, 2)), layout);
  Tensor den_eps = add_scalar(den, 1e-12);
  Aggregate out;
  out.flow = div(num, concat({den_eps, den_eps}, 1));
  out.confidence = mul(den, inverse_coverage(layout, 1));
  return out;
}

Aggregate confidence_aggregate(const Tensor& flow, const Tensor& cenet_inputs,
                               const WindowLayout& layout, const ParamStore& ps) {
  return aggregate_windows(flow, cenet(cenet_inputs, ps), layout);
}

SmoothNet smooth_net(const ParamStore& ps) {
  return {ps.get("dgfo.smooth1.w"), ps.get("dgfo.smooth1.b"), ps.get("dgfo.smooth2.w"),
          ps.get("dgfo.smooth2.b")};
}

Tensor smoothing_alpha(const ParamStore& ps) { return sigmoid(ps.get("dgfo.alpha")); }

Tensor confidence_smooth(const Tensor& flow, const Tensor& confidence, const Tensor& alpha,
                         const SmoothNet& net) {
  if (flow.dim() != 4 || flow.size(1) != 2 || confidence.dim() != 4 || confidence.size(1) != 1 ||
      flow.size(2) != confidence.size(2) || flow.size(3) != confidence.size(3)) {
    throw ShapeError("confidence_smooth: flow " + shape_str(flow.shape()) + " and confidence " +
                     shape_str(confidence.shape()) + " disagree");
  }
  Tensor weighted = mul(flow, concat({confidence, confidence}, 1));
  Tensor s = conv2d(conv2d(weighted, net.w1, net.b1, 1, 1), net.w2, net.b2, 1, 1);
  Tensor keep = add_scalar(scale(alpha, -1.0), 1.0);
  return add(scale_by(s, alpha), scale_by(flow, keep));
}

Tensor upsample_flow(const Tensor& flow, std::size_t out_h, std::size_t out_w) {
  if (flow.dim() != 4 || flow.size(1) != 2) {
    throw ShapeError("upsample_flow: expected [N,2,h,w], got " + shape_str(flow.shape()));
  }
  if (out_h != 2 * flow.size(2) || out_w != 2 * flow.size(3)) {
    throw ShapeError("upsample_flow: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " is not twice " + std::to_string(flow.size(2)) + "x" + std::to_string(flow.size(3)));
  }
  return scale(resize_bilinear(flow, out_h, out_w), 2.0);
}

Tensor windows_from_flow(const Tensor& flow, const WindowLayout& l) {
  const std::size_t n = l.half_clamped.size() / l.k;
  const auto plane = static_cast<std::int64_t>(l.h2 * l.w2);
  auto idx = std::make_shared<std::vector<std::int64_t>>(l.k * n * 2);
  for (std::size_t i = 0; i < l.k * n; ++i) {
    (*idx)[i * 2] = l.half_clamped[i];
    (*idx)[i * 2 + 1] = plane + l.half_clamped[i];
  }
  return gather(flow, idx, {l.k, n, 2});
}

Tensor broadcast_coarse_flow(const Tensor& coarse, const WindowLayout& l) {
  if (coarse.dim() != 4 || coarse.size(1) != 2 || coarse.size(2) != l.hc || coarse.size(3) != l.wc) {
    throw ShapeError("broadcast_coarse_flow: expected [1,2," + std::to_string(l.hc) + "," +
                     std::to_string(l.wc) + "], got " + shape_str(coarse.shape()));
  }
  const std::size_t n = l.half.size() / l.k;
  auto idx = std::make_shared<std::vector<std::int64_t>>(l.k * n * 2);
  for (std::size_t k = 0; k < l.k; ++k) {
    for (std::size_t t = 0; t < n; ++t) {
      (*idx)[(k * n + t) * 2] = static_cast<std::int64_t>(k);
      (*idx)[(k * n + t) * 2 + 1] = static_cast<std::int64_t>(l.k + k);
    }
  }
  return scale(gather(coarse, idx, {l.k, n, 2}), 4.0);
}

DgfoOutput run_iterations(const DgfoInputs& in, const DgfoConfig& cfg, const ParamStore& ps,
                          bool detach) {
  if (cfg.iterations == 0) throw ConfigError("DGFO needs at least one iteration");
  const WindowLayout& l = *in.layout;
  const std::size_t n = l.half.size() / l.k;

  const Tensor ga = fsft(in.fine_a, ps);
  const Tensor gb = fsft(in.fine_b, ps);
  const Tensor map_b = mul(fold_windows(gb, l), inverse_coverage(l, gb.size(2)));
  const Tensor ga_normed = layer_norm_lastdim(ga);
  const Tensor map_b_normed = layer_norm_map(map_b);
  const Tensor wq = ps.get("dgfo.wq.w");
  const Tensor wk = ps.get("dgfo.wk.w");
  const SmoothNet snet = smooth_net(ps);
  const Tensor alpha = smoothing_alpha(ps);

  Tensor flow = in.coarse.defined() ? broadcast_coarse_flow(in.coarse, l) : Tensor(Shape{l.k, n, 2}, 0.0);
  DgfoOutput out;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (detach) flow = flow.detach();
    Tensor gb_warped = warp_windows(map_b, l, flow);
    Tensor im_b_warped = warp_windows(in.image_b_half, l, flow);
    Discrepancy disc = feature_discrepancy(ga, gb_warped);
    Tensor attended = discrepancy_attention(disc.f_attn, flow, wq, wk, l.half_mask);
    Tensor cost = local_cost(ga_normed, map_b_normed, l, flow, cfg.cost_radius);
    Tensor updated = residual_update(attended, concat({disc.f_attn, ga, gb_warped, cost}, 2), ps);
    Aggregate agg =
        confidence_aggregate(updated, concat({ga, gb_warped, in.image_a_windows, im_b_warped}, 2), l, ps);
    Tensor smoothed = confidence_smooth(agg.flow, agg.confidence, alpha, snet);
    out.full.push_back(upsample_flow(smoothed, 2 * l.h2, 2 * l.w2));
    out.half.push_back(smoothed);
    out.confidence = agg.confidence;
    flow = windows_from_flow(smoothed, l);
  }
  return out;
}

}  // namespace crft
