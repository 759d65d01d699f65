#pragma once

#include <random>
#include <string>

#include "crft/params.hpp"
#include "crft/tensor.hpp"

namespace crft {

struct EncoderConfig {
  std::size_t c2 = 32;
  std::size_t c4 = 48;
  std::size_t c8 = 64;
  std::size_t blocks_per_level = 1;
  std::size_t in_channels = 1;

  // Requires c2 <= c4 <= c8, all >= 8, at least one block per level.
  void validate() const;
};

struct PyramidFeatures {
  Tensor f_half;     // [1,c2,H/2,W/2]
  Tensor f_quarter;  // [1,c4,H/4,W/4]
  Tensor f_eighth;   // [1,c8,H/8,W/8]
  std::string source_id;
};

void add_encoder_params(ParamStore& ps, const EncoderConfig& cfg, std::mt19937_64& rng);

// stem conv s2 + relu -> res blocks (1/2) -> conv s2 + relu -> res blocks
// (1/4) -> conv s2 + relu -> res blocks (1/8). Res block: x + conv(relu(conv(x))).
// image is [1,in_channels,H,W] with H, W multiples of 8.
PyramidFeatures extract_pyramid(const Tensor& image, const ParamStore& ps, const EncoderConfig& cfg,
                                std::string source_id = {});

}  // namespace crft
