#pragma once

#include <string>
#include <vector>

#include "crft/io.hpp"
#include "crft/loss.hpp"
#include "crft/tensor.hpp"

namespace crft {

// Mean over valid pixels of ||pred - gt||_2. Flows are [1,2,H,W] or [2,H,W].
double aepe(const Tensor& pred, const Tensor& gt, const Mask& mask);

// 50 points, 0.1 .. 5.0 px inclusive.
std::vector<double> default_thresholds();

struct EvalReport {
  std::vector<double> per_sample;
  double mean = 0.0;
  std::vector<double> thresholds;
  std::vector<double> cmr;  // percent of samples with AEPE < threshold
  // Optional extras filled by evaluate(): coarse-only AEPE per sample.
  std::vector<double> per_sample_coarse;
  double mean_coarse = -1.0;
  std::string label;

  json to_json() const;
  static EvalReport from_json(const json& j);
  std::string cmr_csv() const;  // "threshold,cmr" header + one row per threshold
};

EvalReport cmr_curve(const std::vector<double>& aepes, const std::vector<double>& thresholds);

// Wide CSV: threshold column then one CMR column per report. Throws
// ConfigError if the threshold grids differ.
std::string merge_cmr_csv(const std::vector<EvalReport>& reports, const std::vector<std::string>& names);

// Tile (ty + tx) even -> image_a, odd -> image_b. Images [1,1,H,W] or [H,W].
Tensor checkerboard_fuse(const Tensor& image_a, const Tensor& image_b, std::size_t tile);

// Per-pixel flow magnitude [H,W] of a [1,2,H,W] flow.
std::vector<double> flow_magnitude(const Tensor& flow);

}  // namespace crft
