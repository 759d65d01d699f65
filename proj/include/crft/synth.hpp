#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "crft/io.hpp"
#include "crft/loss.hpp"
#include "crft/tensor.hpp"

namespace crft {

// A(p) = s R(theta) (p - c) + c + t with c the image centre.
struct AffineParams {
  double scale = 1.0;
  double rotation_deg = 0.0;
  double tx = 0.0, ty = 0.0;
};

enum class Preset { Easy, Paper, Stress };

Preset parse_preset(const std::string& name);
std::string preset_name(Preset p);

struct PresetRanges {
  double max_translation;  // |t| <= this, px
  double max_rotation_deg; // theta in [-this, this]
  double scale_lo, scale_hi;
};
PresetRanges preset_ranges(Preset p);

// Intensity remap v -> beta v^gamma + (1 - beta) sig~(v) where sig~ is the
// logistic k (v - m) rescaled to map [0,1] onto [0,1]; strictly increasing.
struct ModalityParams {
  double gamma = 1.0, k = 6.0, m = 0.5, beta = 0.5;
  double noise_sigma = 0.06;

  double remap(double v) const;
  // Inverse of remap on [0,1] by bisection.
  double inverse(double v) const;
};

struct RegistrationSample {
  Tensor image_a;  // [1,1,H,W] in [0,1]
  Tensor image_b;  // [1,1,H,W] in [0,1]
  Tensor gt_flow;  // [1,2,H,W], target = source + flow
  Mask valid;      // H*W, 1 where A(p) lies inside the image
  AffineParams affine;
  ModalityParams modality;
  std::string modality_id = "gamma-logistic-speckle";
  std::string preset = "easy";
  std::uint64_t seed = 0;

  std::size_t height() const { return image_a.size(2); }
  std::size_t width() const { return image_a.size(3); }
};

// flow(p) = A(p) - p for every pixel, [1,2,H,W].
Tensor affine_to_flow(const AffineParams& a, std::size_t height, std::size_t width);
// 1 where A(p) lies in [0,W-1] x [0,H-1].
Mask affine_valid_mask(const AffineParams& a, std::size_t height, std::size_t width);

RegistrationSample generate_pair(std::uint64_t seed, std::size_t size, Preset preset);
// Same texture and modality draws as generate_pair, but with a fixed transform.
RegistrationSample generate_pair_with_affine(std::uint64_t seed, std::size_t size, const AffineParams& affine);

// Per-sample seed derived from a dataset seed and sample index.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Image, flow and mask values rounded to float32 (what a write/read round
// trip returns).
RegistrationSample quantized(const RegistrationSample& s);

// dir/manifest.json + dir/NNNN/{a,b,flow,mask}.crt1, meta.json, flow.json,
// a.pgm, b.pgm.
void write_sample(const fs::path& dir, const RegistrationSample& s);
RegistrationSample read_sample(const fs::path& dir);
void write_dataset(std::size_t n, std::uint64_t seed, Preset preset, std::size_t size, const fs::path& dir);
std::vector<RegistrationSample> read_dataset(const fs::path& dir);

// FlowField sidecar: {"resolution", "full_size": [H, W], "convention"}.
void write_flow(const fs::path& crt1_path, const Tensor& flow, const std::string& resolution,
                std::size_t full_h, std::size_t full_w);

}  // namespace crft
