#include "crft/model.hpp"

#include <random>

#include "crft/coarse_flow.hpp"
#include "crft/error.hpp"
#include "crft/fine_refine.hpp"
#include "crft/ops.hpp"

namespace crft {

void ModelConfig::validate() const {
  encoder.validate();
  if (encoder.c8 % 2 != 0) throw ConfigError("c8 must be even for the positional encoding");
  if (dgfo.cf == 0 || dgfo.residual_width == 0 || dgfo.cenet_width == 0) {
    throw ConfigError("DGFO widths must be positive");
  }
  if (dgfo.iterations == 0) throw ConfigError("iterations must be >= 1");
}

json ModelConfig::to_json() const {
  return {{"c2", encoder.c2},
          {"c4", encoder.c4},
          {"c8", encoder.c8},
          {"blocks_per_level", encoder.blocks_per_level},
          {"coarse_layers", coarse_layers},
          {"proj_gain", proj_gain},
          {"cf", dgfo.cf},
          {"residual_width", dgfo.residual_width},
          {"cenet_width", dgfo.cenet_width},
          {"cost_radius", dgfo.cost_radius},
          {"iterations", dgfo.iterations}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  const json known = c.to_json();
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("model config: unknown key '" + k + "'");
  }
  try {
    c.encoder.c2 = j.value("c2", c.encoder.c2);
    c.encoder.c4 = j.value("c4", c.encoder.c4);
    c.encoder.c8 = j.value("c8", c.encoder.c8);
    c.encoder.blocks_per_level = j.value("blocks_per_level", c.encoder.blocks_per_level);
    c.coarse_layers = j.value("coarse_layers", c.coarse_layers);
    c.proj_gain = j.value("proj_gain", c.proj_gain);
    c.dgfo.cf = j.value("cf", c.dgfo.cf);
    c.dgfo.residual_width = j.value("residual_width", c.dgfo.residual_width);
    c.dgfo.cenet_width = j.value("cenet_width", c.dgfo.cenet_width);
    c.dgfo.cost_radius = j.value("cost_radius", c.dgfo.cost_radius);
    c.dgfo.iterations = j.value("iterations", c.dgfo.iterations);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

ParamStore build_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore ps;
  add_encoder_params(ps, cfg.encoder, rng);
  add_coarse_params(ps, cfg.encoder.c8, cfg.coarse_layers, cfg.proj_gain, rng);
  add_fine_params(ps, cfg.encoder.c2, cfg.encoder.c4, cfg.dgfo.cf, rng);
  add_dgfo_params(ps, cfg.dgfo, rng);
  ps.round_to_f32();
  return ps;
}

Tensor half_resolution(const Tensor& image) {
  if (image.dim() != 4 || image.size(0) != 1 || image.size(1) != 1) {
    throw ShapeError("half_resolution: expected [1,1,H,W], got " + shape_str(image.shape()));
  }
  const std::size_t h = image.size(2), w = image.size(3), h2 = h / 2, w2 = w / 2;
  auto v = image.values();
  std::vector<double> out(h2 * w2);
  for (std::size_t y = 0; y < h2; ++y) {
    for (std::size_t x = 0; x < w2; ++x) {
      out[y * w2 + x] = 0.25 * (v[(2 * y) * w + 2 * x] + v[(2 * y) * w + 2 * x + 1] +
                                v[(2 * y + 1) * w + 2 * x] + v[(2 * y + 1) * w + 2 * x + 1]);
    }
  }
  return Tensor(Shape{1, 1, h2, w2}, std::move(out));
}

Tensor upsample_coarse_flow(const Tensor& coarse, std::size_t h, std::size_t w) {
  return scale(resize_bilinear(coarse, h, w), 8.0);
}

Prediction forward(const ParamStore& ps, const ModelConfig& cfg, const Tensor& image_a,
                   const Tensor& image_b, const ForwardOptions& opt) {
  if (image_a.shape() != image_b.shape()) {
    throw ShapeError("forward: image sizes differ (" + shape_str(image_a.shape()) + " vs " +
                     shape_str(image_b.shape()) + ")");
  }
  const std::size_t h = image_a.size(2), w = image_a.size(3);
  Prediction out;
  if (!opt.enable_fe && !opt.enable_idgo) {
    out.flows.push_back(Tensor(Shape{1, 2, h, w}, 0.0));
    return out;
  }
  PyramidFeatures pa = extract_pyramid(image_a, ps, cfg.encoder, "A");
  PyramidFeatures pb = extract_pyramid(image_b, ps, cfg.encoder, "B");
  if (opt.enable_fe) out.coarse = estimate_coarse_flow(pa.f_eighth, pb.f_eighth, ps, cfg.coarse_layers);
  if (!opt.enable_idgo) {
    out.flows.push_back(upsample_coarse_flow(out.coarse, h, w));
    return out;
  }
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(h / 8, w / 8));
  WindowSet wa = gather_windows(pa, layout, 'A');
  WindowSet wb = gather_windows(pb, layout, 'B');
  auto [fine_a, fine_b] = hierarchical_fuse(wa, wb, ps);
  DgfoInputs in;
  in.layout = layout;
  in.fine_a = fine_a;
  in.fine_b = fine_b;
  in.image_a_windows = gather_window_tokens(half_resolution(image_a), layout->half, kFineWindow * kFineWindow);
  in.image_b_half = half_resolution(image_b);
  in.coarse = out.coarse;
  DgfoOutput d = run_iterations(in, cfg.dgfo, ps, opt.detach_iterations);
  out.flows = std::move(d.full);
  out.confidence = d.confidence;
  return out;
}

}  // namespace crft
