#pragma once

#include <random>
#include <utility>

#include "crft/params.hpp"
#include "crft/tensor.hpp"

namespace crft {

// Fixed 2-D sinusoidal table [1,C,H,W]. Channel pair k holds
// sin(w*pos), cos(w*pos) with pos = x for even k and y for odd k,
// w = 10000^(-2*floor(k/2)/C). C must be even.
Tensor positional_encoding_table(std::size_t c, std::size_t h, std::size_t w);
Tensor add_positional_encoding(const Tensor& f);

// Registers "coarse.sa<l>", "coarse.ca<l>" attention blocks and the
// "coarse.proj" projection, whose weight starts at proj_gain * I.
void add_coarse_params(ParamStore& ps, std::size_t c, std::size_t layers, double proj_gain,
                       std::mt19937_64& rng);

// `layers` rounds of [SA on each map; CA A<-B and B<-A from the same
// inputs]. The same parameters serve both images. Maps are [1,C,H,W].
std::pair<Tensor, Tensor> sa_ca_stack(const Tensor& fa, const Tensor& fb, const ParamStore& ps,
                                      std::size_t layers);

// Per pixel (W f + b) / sqrt(C).
Tensor project_normalize(const Tensor& f, const Tensor& w, const Tensor& b);

struct CorrelationVolume {
  Tensor values;  // [Ha*Wa, Hb*Wb], values[p,q] = <fa(p), fb(q)>
  Tensor probs;   // row softmax of values; undefined until computed
  std::size_t ha = 0, wa = 0, hb = 0, wb = 0;
};

CorrelationVolume global_correlation(const Tensor& fa_hat, const Tensor& fb_hat);

// Fills vol.probs and returns T_c [1,2,Ha,Wa] with T_c(p) = sum_q P(p,q) q - p,
// q = (q mod Wb, q div Wb) in pixels of the coarse grid.
Tensor coarse_flow_from_correlation(CorrelationVolume& vol);

// Whole coarse stage: positional encoding, SA/CA stack, projection,
// correlation and soft-argmax.
Tensor estimate_coarse_flow(const Tensor& fa8, const Tensor& fb8, const ParamStore& ps,
                            std::size_t layers, CorrelationVolume* volume_out = nullptr);

}  // namespace crft
