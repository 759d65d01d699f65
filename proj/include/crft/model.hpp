#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "crft/dgfo.hpp"
#include "crft/encoder.hpp"
#include "crft/io.hpp"
#include "crft/params.hpp"

namespace crft {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t coarse_layers = 2;
  // Initial W_proj = proj_gain * I sharpens the first correlation softmax.
  double proj_gain = 6.0;
  DgfoConfig dgfo;

  void validate() const;
  json to_json() const;
  static ModelConfig from_json(const json& j);
};

// Pipeline switches mirroring the ablation rows.
struct ForwardOptions {
  // Coarse flow estimation feeds the DGFO initialisation.
  bool enable_fe = true;
  // Iterative refinement; when off the output is the upsampled coarse flow.
  bool enable_idgo = true;
  // Cut gradients between refinement iterations.
  bool detach_iterations = false;
};

struct Prediction {
  Tensor coarse;              // T_c [1,2,H/8,W/8]; undefined when FE is off
  std::vector<Tensor> flows;  // full-resolution flows, one per iteration
  Tensor confidence;          // last M_f [1,1,H/2,W/2]; undefined without IDGO
};

ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed);

// 2x2 average pooling of an image [1,1,H,W] (no gradient).
Tensor half_resolution(const Tensor& image);

// x8 bilinear upsampling with magnitudes x8.
Tensor upsample_coarse_flow(const Tensor& coarse, std::size_t h, std::size_t w);

Prediction forward(const ParamStore& ps, const ModelConfig& cfg, const Tensor& image_a,
                   const Tensor& image_b, const ForwardOptions& opt = {});

}  // namespace crft
