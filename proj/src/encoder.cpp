#include "crft/encoder.hpp"

#include "crft/error.hpp"
#include "crft/nn.hpp"

namespace crft {

namespace {

std::string block_name(const char* level, std::size_t i) {
  return std::string("enc.") + level + ".res" + std::to_string(i);
}

Tensor res_stack(const ParamStore& ps, const char* level, std::size_t blocks, Tensor x) {
  for (std::size_t i = 0; i < blocks; ++i) {
    const std::string p = block_name(level, i);
    x = add(x, nn::conv(ps, p + ".c2", relu(nn::conv(ps, p + ".c1", x, 1, 1)), 1, 1));
  }
  return x;
}

}  // namespace

void EncoderConfig::validate() const {
  if (c2 < 8 || c4 < 8 || c8 < 8) throw ConfigError("encoder channels must all be >= 8");
  if (c2 > c4 || c4 > c8) throw ConfigError("encoder channels must satisfy c2 <= c4 <= c8");
  if (blocks_per_level == 0) throw ConfigError("encoder needs at least one residual block per level");
  if (in_channels == 0) throw ConfigError("encoder needs at least one input channel");
}

void add_encoder_params(ParamStore& ps, const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  nn::add_conv(ps, "enc.stem", cfg.in_channels, cfg.c2, 3, rng);
  const struct {
    const char* level;
    const char* down;
    std::size_t in, c;
  } levels[] = {{"l2", nullptr, 0, cfg.c2}, {"l4", "enc.down4", cfg.c2, cfg.c4},
                {"l8", "enc.down8", cfg.c4, cfg.c8}};
  for (const auto& l : levels) {
    if (l.down) nn::add_conv(ps, l.down, l.in, l.c, 3, rng);
    for (std::size_t i = 0; i < cfg.blocks_per_level; ++i) {
      nn::add_conv(ps, block_name(l.level, i) + ".c1", l.c, l.c, 3, rng);
      nn::add_conv(ps, block_name(l.level, i) + ".c2", l.c, l.c, 3, rng);
    }
  }
}

PyramidFeatures extract_pyramid(const Tensor& image, const ParamStore& ps, const EncoderConfig& cfg,
                                std::string source_id) {
  if (image.dim() != 4 || image.size(0) != 1 || image.size(1) != cfg.in_channels) {
    throw ShapeError("extract_pyramid: expected image [1," + std::to_string(cfg.in_channels) +
                     ",H,W], got " + shape_str(image.shape()));
  }
  const std::size_t h = image.size(2), w = image.size(3);
  if (h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0) {
    throw ShapeError("extract_pyramid: image size " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not a multiple of 8; pad the image to the next multiple of 8");
  }
  PyramidFeatures out;
  out.source_id = std::move(source_id);
  out.f_half = res_stack(ps, "l2", cfg.blocks_per_level, relu(nn::conv(ps, "enc.stem", image, 2, 1)));
  out.f_quarter =
      res_stack(ps, "l4", cfg.blocks_per_level, relu(nn::conv(ps, "enc.down4", out.f_half, 2, 1)));
  out.f_eighth =
      res_stack(ps, "l8", cfg.blocks_per_level, relu(nn::conv(ps, "enc.down8", out.f_quarter, 2, 1)));
  return out;
}

}  // namespace crft
