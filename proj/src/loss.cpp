#include "crft/loss.hpp"

#include <cmath>

#include "crft/error.hpp"
#include "crft/ops.hpp"

namespace crft {

Tensor downsample_flow_gt(const Tensor& gt) {
  if (gt.dim() != 4 || gt.size(1) != 2 || gt.size(2) % 8 != 0 || gt.size(3) % 8 != 0) {
    throw ShapeError("downsample_flow_gt: expected [1,2,H,W] with H, W multiples of 8, got " +
                     shape_str(gt.shape()));
  }
  const std::size_t h = gt.size(2), w = gt.size(3), hc = h / 8, wc = w / 8;
  auto v = gt.values();
  std::vector<double> out(2 * hc * wc, 0.0);
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out[(c * hc + y / 8) * wc + x / 8] += v[(c * h + y) * w + x];
      }
    }
  }
  for (double& o : out) o /= 64.0 * 8.0;
  return Tensor(Shape{1, 2, hc, wc}, std::move(out));
}

Mask coarse_valid_mask(const Mask& mask, std::size_t h, std::size_t w) {
  if (mask.size() != h * w || h % 8 != 0 || w % 8 != 0) {
    throw ShapeError("coarse_valid_mask: mask does not match an " + std::to_string(h) + "x" +
                     std::to_string(w) + " image with sides divisible by 8");
  }
  const std::size_t hc = h / 8, wc = w / 8;
  Mask out(hc * wc, 1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask[y * w + x]) out[(y / 8) * wc + x / 8] = 0;
    }
  }
  return out;
}

Tensor masked_l1(const Tensor& pred, const Tensor& gt, const Mask& mask) {
  if (pred.shape() != gt.shape() || pred.dim() != 4 || pred.size(1) != 2) {
    throw ShapeError("masked_l1: prediction " + shape_str(pred.shape()) + " and target " +
                     shape_str(gt.shape()) + " differ");
  }
  const std::size_t plane = pred.size(2) * pred.size(3);
  if (mask.size() != plane) throw ShapeError("masked_l1: mask size does not match the flow");
  std::size_t count = 0;
  std::vector<double> m(2 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    m[i] = m[plane + i] = mask[i] ? 1.0 : 0.0;
    count += mask[i] ? 1 : 0;
  }
  if (count == 0) throw ShapeError("masked_l1: no valid pixels (degenerate sample)");
  Tensor diff = mul(abs(sub(pred, gt)), Tensor(pred.shape(), std::move(m)));
  return scale(sum(diff), 1.0 / static_cast<double>(count));
}

Tensor coarse_loss(const Tensor& coarse, const Tensor& gt_coarse, const Mask& mask_coarse) {
  return masked_l1(coarse, gt_coarse, mask_coarse);
}

IterativeLoss iterative_loss(const std::vector<Tensor>& flows, const Tensor& gt, const Mask& mask,
                             double gamma, bool use_all) {
  if (flows.empty()) throw ShapeError("iterative_loss: no iterations to supervise");
  const std::size_t n = flows.size();
  IterativeLoss out;
  for (std::size_t i = 0; i < n; ++i) {
    out.per_iteration.push_back(masked_l1(flows[i], gt, mask));
    out.weights.push_back(use_all ? std::pow(gamma, static_cast<double>(n - 1 - i)) : (i + 1 == n ? 1.0 : 0.0));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (out.weights[i] == 0.0) continue;
    Tensor term = scale(out.per_iteration[i], out.weights[i]);
    out.total = out.total.defined() ? add(out.total, term) : term;
  }
  return out;
}

Tensor total_loss(const Tensor& lc, const Tensor& lf, double lambda_c, double lambda_f) {
  if (lambda_c < 0.0 || lambda_f < 0.0) throw ConfigError("loss weights must be non-negative");
  if (!lc.defined()) return scale(lf, lambda_f);
  return add(scale(lc, lambda_c), scale(lf, lambda_f));
}

json LossReport::to_json() const {
  return {{"L_c", l_c},          {"L_f_iterations", l_f_iterations}, {"L_f", l_f},
          {"L_total", l_total},  {"valid_coarse", valid_coarse},     {"valid", valid}};
}

}  // namespace crft
