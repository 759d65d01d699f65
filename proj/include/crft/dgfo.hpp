#pragma once

#include <memory>
#include <random>
#include <vector>

#include "crft/fine_refine.hpp"
#include "crft/params.hpp"

namespace crft {

struct DgfoConfig {
  std::size_t cf = 32;
  std::size_t residual_width = 32;
  std::size_t cenet_width = 16;
  // Local cost lookup covers offsets [-r, r]^2 on the 1/2 lattice.
  std::size_t cost_radius = 2;
  std::size_t iterations = 3;

  std::size_t cost_channels() const { return (2 * cost_radius + 1) * (2 * cost_radius + 1); }
  std::size_t residual_inputs() const { return 2 + 3 * cf + cost_channels(); }
  std::size_t cenet_inputs() const { return 2 * cf + 2; }
};

void add_dgfo_params(ParamStore& ps, const DgfoConfig& cfg, std::mt19937_64& rng);

// Per-position two-layer MLP: linear -> gelu -> linear. x is [..., C_f].
Tensor fsft(const Tensor& x, const ParamStore& ps);

// output(p) = f sampled bilinearly at p + flow(p). f [N,C,H,W], flow
// [N,2,H,W] in pixels of f's lattice. Samples leaving [0,W-1]x[0,H-1] clamp
// to the border; `out_of_bounds` receives one flag per [N,H,W] position.
Tensor sgt_warp(const Tensor& f, const Tensor& flow, std::vector<std::uint8_t>* out_of_bounds = nullptr);

// Samples map [1,C,H2,W2] at every half-window position displaced by
// flow [K,n,2]; returns [K,n,C].
Tensor warp_windows(const Tensor& map, const WindowLayout& layout, const Tensor& flow);

struct Discrepancy {
  Tensor delta;   // per-window min-max rescale of |fa - fb_warped|, [K,n,C]
  Tensor f_attn;  // 1 - delta
};

Discrepancy feature_discrepancy(const Tensor& fa, const Tensor& fb_warped);

// T'(p) = sum_q softmax_q(Wq f(p) . Wk f(q) / sqrt(C)) T(q) within each
// window. f_attn [K,n,C], flow [K,n,2]; key_mask (K*n flags) may be null.
Tensor discrepancy_attention(const Tensor& f_attn, const Tensor& flow, const Tensor& wq,
                             const Tensor& wk, const nn::KeyMask& key_mask = nullptr);

// Dot products between layer-normed window features fa [K,n,C] and the
// layer-normed map [1,C,H2,W2] sampled at flow + d for every offset d in
// [-r,r]^2 (row-major, dy outer), divided by C. Returns [K,n,(2r+1)^2].
Tensor local_cost(const Tensor& fa_normed, const Tensor& map_normed, const WindowLayout& layout,
                  const Tensor& flow, std::size_t radius);

// T' + conv3x3(relu(conv3x3(relu(conv1x1([T', features]))))). The windows are
// square: n = side^2. T' [K,n,2], features [K,n,X].
Tensor residual_update(const Tensor& flow, const Tensor& features, const ParamStore& ps);

// sigmoid(conv3x3(relu(conv3x3(x)))), x [K,n,X] -> [K,n,1].
Tensor cenet(const Tensor& inputs, const ParamStore& ps);

struct Aggregate {
  Tensor flow;        // T_f [1,2,H2,W2]
  Tensor confidence;  // M_f [1,1,H2,W2]
};

// Lays window flows [K,n,2] onto the 1/2 lattice. Where windows overlap the
// flow is the confidence-weighted mean; M_f is the summed confidence divided
// by the number of covering window positions. Padded positions carry no
// weight.
Aggregate aggregate_windows(const Tensor& flow, const Tensor& confidence, const WindowLayout& layout);

// CENet on `cenet_inputs` followed by aggregate_windows.
Aggregate confidence_aggregate(const Tensor& flow, const Tensor& cenet_inputs,
                               const WindowLayout& layout, const ParamStore& ps);

struct SmoothNet {
  Tensor w1, b1, w2, b2;
};

SmoothNet smooth_net(const ParamStore& ps);
// alpha_s = sigmoid(dgfo.alpha), shape [1].
Tensor smoothing_alpha(const ParamStore& ps);

// alpha * S(T_f * M_f) + (1 - alpha) * T_f, S = conv3x3 -> conv3x3 over the
// two flow channels. alpha holds one value.
Tensor confidence_smooth(const Tensor& flow, const Tensor& confidence, const Tensor& alpha,
                         const SmoothNet& net);

// Bilinear x2 spatial upsampling with magnitudes doubled.
Tensor upsample_flow(const Tensor& flow, std::size_t out_h, std::size_t out_w);

// Window view [K,n,2] of a 1/2-lattice flow [1,2,H2,W2], reading the
// nearest in-bounds pixel for padded positions.
Tensor windows_from_flow(const Tensor& flow, const WindowLayout& layout);

// Broadcast of each coarse pixel's flow over its window, x4 for the
// 1/8 -> 1/2 unit change. coarse [1,2,Hc,Wc] -> [K,n,2].
Tensor broadcast_coarse_flow(const Tensor& coarse, const WindowLayout& layout);

struct DgfoInputs {
  std::shared_ptr<const WindowLayout> layout;
  Tensor fine_a;           // [K,n,C_f]
  Tensor fine_b;           // [K,n,C_f]
  Tensor image_a_windows;  // [K,n,1] half-resolution intensities of A
  Tensor image_b_half;     // [1,1,H2,W2]
  Tensor coarse;           // [1,2,Hc,Wc]; undefined starts from zero flow
};

struct DgfoOutput {
  std::vector<Tensor> full;  // per-iteration [1,2,H,W]
  std::vector<Tensor> half;  // per-iteration smoothed T'_f [1,2,H2,W2]
  Tensor confidence;         // M_f of the last iteration
};

// One-time broadcast initialisation, then per iteration:
// warp -> discrepancy -> attention -> residual -> CENet aggregation ->
// smoothing -> upsampling. With detach set, each iteration starts from a
// constant copy of the previous flow.
DgfoOutput run_iterations(const DgfoInputs& in, const DgfoConfig& cfg, const ParamStore& ps,
                          bool detach = false);

}  // namespace crft
