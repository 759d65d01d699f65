#pragma once

#include <cstdint>
#include <vector>

#include "crft/io.hpp"
#include "crft/tensor.hpp"

namespace crft {

using Mask = std::vector<std::uint8_t>;

// 8x8 average pool of a full-resolution flow [1,2,H,W] with magnitudes /8.
Tensor downsample_flow_gt(const Tensor& gt);
// A coarse pixel is valid when all 64 pixels of its block are valid.
Mask coarse_valid_mask(const Mask& mask, std::size_t h, std::size_t w);

// Mean over valid pixels of |dx| + |dy|. Throws ShapeError on an empty mask.
Tensor masked_l1(const Tensor& pred, const Tensor& gt, const Mask& mask);

Tensor coarse_loss(const Tensor& coarse, const Tensor& gt_coarse, const Mask& mask_coarse);

struct IterativeLoss {
  Tensor total;                 // sum_i w_i L_f^i
  std::vector<Tensor> per_iteration;
  std::vector<double> weights;  // gamma^(N-i), or (0,..,0,1) without IL
};

// With `use_all` false only the last iteration is supervised, weight 1.
IterativeLoss iterative_loss(const std::vector<Tensor>& flows, const Tensor& gt, const Mask& mask,
                             double gamma, bool use_all = true);

Tensor total_loss(const Tensor& lc, const Tensor& lf, double lambda_c, double lambda_f);

struct LossReport {
  double l_c = 0.0;
  std::vector<double> l_f_iterations;
  double l_f = 0.0;
  double l_total = 0.0;
  std::size_t valid_coarse = 0;
  std::size_t valid = 0;

  json to_json() const;
};

}  // namespace crft
