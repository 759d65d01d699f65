#include "crft/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "crft/error.hpp"
#include "crft/ops.hpp"

namespace crft {

namespace {

constexpr double kPi = std::numbers::pi;

struct Wave {
  double kx, ky, phase;
};

struct Polygon {
  std::vector<double> xs, ys;
  double intensity, opacity;
};

// Band-limited sinusoid sum overlaid with soft-edged convex polygons,
// defined on continuous pixel coordinates.
class Texture {
 public:
  Texture(std::mt19937_64& rng, std::size_t size) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    for (int i = 0; i < kWaves; ++i) {
      const double lambda = uni(6.0, 24.0);
      const double ang = uni(0.0, 2.0 * kPi);
      waves_.push_back({2.0 * kPi / lambda * std::cos(ang), 2.0 * kPi / lambda * std::sin(ang),
                        uni(0.0, 2.0 * kPi)});
    }
    const double s = static_cast<double>(size);
    const double area = std::max(1.0, std::round((s / 64.0) * (s / 64.0)));
    const auto count = static_cast<int>(std::uniform_int_distribution<int>(6, 10)(rng) * area);
    for (int p = 0; p < count; ++p) {
      const double cx = uni(-0.25 * s, 1.25 * s), cy = uni(-0.25 * s, 1.25 * s);
      const double r = uni(4.0, 16.0);
      const int n = std::uniform_int_distribution<int>(3, 5)(rng);
      std::vector<double> angs(static_cast<std::size_t>(n));
      for (double& a : angs) a = uni(0.0, 2.0 * kPi);
      std::sort(angs.begin(), angs.end());
      Polygon poly;
      for (double a : angs) {
        poly.xs.push_back(cx + r * std::cos(a));
        poly.ys.push_back(cy + r * std::sin(a));
      }
      poly.intensity = uni(0.0, 1.0);
      poly.opacity = uni(0.6, 1.0);
      polys_.push_back(std::move(poly));
    }
  }

  double operator()(double x, double y) const {
    double v = 0.0;
    for (const auto& w : waves_) v += std::sin(w.kx * x + w.ky * y + w.phase);
    double base = 0.5 + 0.25 * 0.8 * v / std::sqrt(kWaves / 2.0);
    for (const auto& p : polys_) {
      double d = 1e9;
      const std::size_t n = p.xs.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double x0 = p.xs[i], y0 = p.ys[i];
        const double ex = p.xs[(i + 1) % n] - x0, ey = p.ys[(i + 1) % n] - y0;
        const double len = std::hypot(ex, ey);
        d = std::min(d, (ex * (y - y0) - ey * (x - x0)) / len);
      }
      const double cov = std::clamp(0.5 + d, 0.0, 1.0) * p.opacity;
      base = base * (1.0 - cov) + cov * p.intensity;
    }
    return std::clamp(base, 0.0, 1.0);
  }

 private:
  static constexpr int kWaves = 12;
  std::vector<Wave> waves_;
  std::vector<Polygon> polys_;
};

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::string sample_dir_name(std::size_t i, std::size_t n) {
  const std::size_t width = std::max<std::size_t>(4, std::to_string(n > 0 ? n - 1 : 0).size());
  std::string s = std::to_string(i);
  return std::string(width - std::min(width, s.size()), '0') + s;
}

RegistrationSample render(std::mt19937_64& rng, std::uint64_t seed, std::size_t size, Preset preset,
                          const AffineParams* fixed_affine) {
  if (size == 0 || size % 8 != 0) {
    throw ConfigError("sample size " + std::to_string(size) + " is not a positive multiple of 8");
  }
  Texture tex(rng, size);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const PresetRanges r = preset_ranges(preset);
  AffineParams a;
  a.scale = uni(r.scale_lo, r.scale_hi);
  a.rotation_deg = uni(-r.max_rotation_deg, r.max_rotation_deg);
  const double radius = uni(0.0, r.max_translation);
  const double dir = uni(0.0, 2.0 * kPi);
  a.tx = radius * std::cos(dir);
  a.ty = radius * std::sin(dir);
  if (fixed_affine) a = *fixed_affine;
  if (!(a.scale > 0.0)) throw ConfigError("affine scale must be positive");

  ModalityParams mod;
  mod.gamma = std::exp(uni(std::log(0.5), std::log(2.0)));
  mod.k = uni(4.0, 10.0);
  mod.m = uni(0.3, 0.7);
  mod.beta = uni(0.3, 0.7);
  std::normal_distribution<double> noise(0.0, 1.0);

  const std::size_t h = size, w = size;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0, cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double th = a.rotation_deg * kPi / 180.0;
  const double co = std::cos(th), si = std::sin(th);
  std::vector<double> ia(h * w), ib(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto fx = static_cast<double>(x), fy = static_cast<double>(y);
      ia[y * w + x] = tex(fx, fy);
      const double qx = fx - cx - a.tx, qy = fy - cy - a.ty;
      const double bx = (co * qx + si * qy) / a.scale + cx;
      const double by = (-si * qx + co * qy) / a.scale + cy;
      ib[y * w + x] = mod.remap(tex(bx, by));
    }
  }
  for (double& v : ib) v = std::clamp(v * (1.0 + mod.noise_sigma * noise(rng)), 0.0, 1.0);

  RegistrationSample s;
  s.image_a = Tensor(Shape{1, 1, h, w}, std::move(ia));
  s.image_b = Tensor(Shape{1, 1, h, w}, std::move(ib));
  s.gt_flow = affine_to_flow(a, h, w);
  s.valid = affine_valid_mask(a, h, w);
  s.affine = a;
  s.modality = mod;
  s.preset = preset_name(preset);
  s.seed = seed;
  return s;
}

json affine_json(const AffineParams& a) {
  return {{"scale", a.scale}, {"rotation_deg", a.rotation_deg}, {"tx", a.tx}, {"ty", a.ty}};
}

}  // namespace

Preset parse_preset(const std::string& name) {
  if (name == "easy") return Preset::Easy;
  if (name == "paper") return Preset::Paper;
  if (name == "stress") return Preset::Stress;
  throw ConfigError("unknown preset '" + name + "' (expected easy, paper or stress)");
}

std::string preset_name(Preset p) {
  switch (p) {
    case Preset::Easy: return "easy";
    case Preset::Paper: return "paper";
    case Preset::Stress: return "stress";
  }
  return "easy";
}

PresetRanges preset_ranges(Preset p) {
  switch (p) {
    case Preset::Easy: return {6.0, 10.0, 0.95, 1.05};
    case Preset::Paper: return {30.0, 45.0, 0.9, 1.1};
    case Preset::Stress: return {6.0, 90.0, 0.5, 1.5};
  }
  return {6.0, 10.0, 0.95, 1.05};
}

double ModalityParams::remap(double v) const {
  const double lo = logistic(-k * m), hi = logistic(k * (1.0 - m));
  const double sig = (logistic(k * (v - m)) - lo) / (hi - lo);
  return beta * std::pow(std::max(v, 0.0), gamma) + (1.0 - beta) * sig;
}

double ModalityParams::inverse(double v) const {
  double lo = 0.0, hi = 1.0;
  if (v <= remap(lo)) return lo;
  if (v >= remap(hi)) return hi;
  for (int i = 0; i < 100; ++i) {
    const double mid = 0.5 * (lo + hi);
    (remap(mid) < v ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Tensor affine_to_flow(const AffineParams& a, std::size_t height, std::size_t width) {
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  const double th = a.rotation_deg * kPi / 180.0;
  const double co = std::cos(th), si = std::sin(th);
  const std::size_t plane = height * width;
  std::vector<double> v(2 * plane);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      const double ax = a.scale * (co * dx - si * dy) + cx + a.tx;
      const double ay = a.scale * (si * dx + co * dy) + cy + a.ty;
      v[y * width + x] = ax - static_cast<double>(x);
      v[plane + y * width + x] = ay - static_cast<double>(y);
    }
  }
  return Tensor(Shape{1, 2, height, width}, std::move(v));
}

Mask affine_valid_mask(const AffineParams& a, std::size_t height, std::size_t width) {
  Tensor flow = affine_to_flow(a, height, width);
  const std::size_t plane = height * width;
  Mask m(plane);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double ax = static_cast<double>(x) + flow[y * width + x];
      const double ay = static_cast<double>(y) + flow[plane + y * width + x];
      m[y * width + x] = ax >= 0.0 && ay >= 0.0 && ax <= static_cast<double>(width - 1) &&
                         ay <= static_cast<double>(height - 1);
    }
  }
  return m;
}

RegistrationSample generate_pair(std::uint64_t seed, std::size_t size, Preset preset) {
  std::mt19937_64 rng(seed);
  return render(rng, seed, size, preset, nullptr);
}

RegistrationSample generate_pair_with_affine(std::uint64_t seed, std::size_t size,
                                             const AffineParams& affine) {
  std::mt19937_64 rng(seed);
  return render(rng, seed, size, Preset::Easy, &affine);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

RegistrationSample quantized(const RegistrationSample& s) {
  RegistrationSample q = s;
  auto copy = [](const Tensor& t) {
    Tensor c = t.detach();
    round_f32_inplace(c.mutable_values());
    return c;
  };
  q.image_a = copy(s.image_a);
  q.image_b = copy(s.image_b);
  q.gt_flow = copy(s.gt_flow);
  return q;
}

void write_flow(const fs::path& crt1_path, const Tensor& flow, const std::string& resolution,
                std::size_t full_h, std::size_t full_w) {
  if (flow.dim() != 4 || flow.size(0) != 1 || flow.size(1) != 2) {
    throw ShapeError("write_flow: expected [1,2,H,W], got " + shape_str(flow.shape()));
  }
  write_crt1(crt1_path, reshape(flow, {2, flow.size(2), flow.size(3)}));
  fs::path side = crt1_path;
  side.replace_extension(".json");
  write_json(side, {{"resolution", resolution},
                    {"full_size", {full_h, full_w}},
                    {"convention", "target=source+flow"}});
}

void write_sample(const fs::path& dir, const RegistrationSample& s) {
  const std::size_t h = s.height(), w = s.width();
  write_crt1(dir / "a.crt1", reshape(s.image_a, {h, w}));
  write_crt1(dir / "b.crt1", reshape(s.image_b, {h, w}));
  write_flow(dir / "flow.crt1", s.gt_flow, "full", h, w);
  std::vector<double> m(s.valid.begin(), s.valid.end());
  write_crt1(dir / "mask.crt1", Tensor(Shape{h, w}, std::move(m)));
  write_pgm(dir / "a.pgm", h, w, s.image_a.values());
  write_pgm(dir / "b.pgm", h, w, s.image_b.values());
  const ModalityParams& md = s.modality;
  write_json(dir / "meta.json",
             {{"seed", s.seed},
              {"preset", s.preset},
              {"size", {h, w}},
              {"affine", affine_json(s.affine)},
              {"modality",
               {{"id", s.modality_id},
                {"gamma", md.gamma},
                {"k", md.k},
                {"m", md.m},
                {"beta", md.beta},
                {"noise_sigma", md.noise_sigma}}}});
}

RegistrationSample read_sample(const fs::path& dir) {
  const json meta = read_json(dir / "meta.json");
  RegistrationSample s;
  try {
    s.seed = meta.at("seed").get<std::uint64_t>();
    s.preset = meta.at("preset").get<std::string>();
    const auto& a = meta.at("affine");
    s.affine = {a.at("scale").get<double>(), a.at("rotation_deg").get<double>(), a.at("tx").get<double>(),
                a.at("ty").get<double>()};
    const auto& m = meta.at("modality");
    s.modality_id = m.at("id").get<std::string>();
    s.modality.gamma = m.at("gamma").get<double>();
    s.modality.k = m.at("k").get<double>();
    s.modality.m = m.at("m").get<double>();
    s.modality.beta = m.at("beta").get<double>();
    s.modality.noise_sigma = m.at("noise_sigma").get<double>();
  } catch (const json::exception& e) {
    throw IoError((dir / "meta.json").string() + ": " + e.what());
  }
  Tensor a = read_crt1(dir / "a.crt1");
  Tensor b = read_crt1(dir / "b.crt1");
  Tensor f = read_crt1(dir / "flow.crt1");
  Tensor m = read_crt1(dir / "mask.crt1");
  if (a.dim() != 2 || b.shape() != a.shape() || m.shape() != a.shape() ||
      f.shape() != Shape{2, a.size(0), a.size(1)}) {
    throw IoError(dir.string() + ": tensor shapes are inconsistent");
  }
  const std::size_t h = a.size(0), w = a.size(1);
  s.image_a = reshape(a, {1, 1, h, w});
  s.image_b = reshape(b, {1, 1, h, w});
  s.gt_flow = reshape(f, {1, 2, h, w});
  s.valid.resize(h * w);
  for (std::size_t i = 0; i < h * w; ++i) s.valid[i] = m[i] != 0.0 ? 1 : 0;
  return s;
}

void write_dataset(std::size_t n, std::uint64_t seed, Preset preset, std::size_t size, const fs::path& dir) {
  if (size == 0 || size % 8 != 0) {
    throw ConfigError("sample size " + std::to_string(size) + " is not a positive multiple of 8");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  json samples = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string name = sample_dir_name(i, n);
    const std::uint64_t s = derive_seed(seed, i);
    write_sample(dir / name, generate_pair(s, size, preset));
    samples.push_back({{"dir", name}, {"seed", s}});
  }
  write_json(dir / "manifest.json", {{"format", "crft-dataset"},
                                     {"count", n},
                                     {"seed", seed},
                                     {"preset", preset_name(preset)},
                                     {"size", size},
                                     {"samples", samples}});
}

std::vector<RegistrationSample> read_dataset(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  if (manifest.value("format", "") != "crft-dataset" || !manifest.contains("samples") ||
      !manifest["samples"].is_array()) {
    throw IoError((dir / "manifest.json").string() + ": not a dataset manifest");
  }
  std::vector<RegistrationSample> out;
  for (const auto& e : manifest["samples"]) {
    if (!e.contains("dir") || !e["dir"].is_string()) {
      throw IoError((dir / "manifest.json").string() + ": sample entry without 'dir'");
    }
    out.push_back(read_sample(dir / e["dir"].get<std::string>()));
  }
  if (out.size() != manifest.value("count", out.size())) {
    throw IoError((dir / "manifest.json").string() + ": count disagrees with the sample list");
  }
  return out;
}

}  // namespace crft
