#include "crft/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "crft/error.hpp"

namespace crft {

namespace {

std::pair<std::size_t, std::size_t> flow_hw(const Tensor& f) {
  if (f.dim() == 4 && f.size(0) == 1 && f.size(1) == 2) return {f.size(2), f.size(3)};
  if (f.dim() == 3 && f.size(0) == 2) return {f.size(1), f.size(2)};
  throw ShapeError("expected a flow [1,2,H,W] or [2,H,W], got " + shape_str(f.shape()));
}

std::pair<std::size_t, std::size_t> image_hw(const Tensor& im) {
  if (im.dim() == 4 && im.size(0) == 1 && im.size(1) == 1) return {im.size(2), im.size(3)};
  if (im.dim() == 2) return {im.size(0), im.size(1)};
  throw ShapeError("expected an image [1,1,H,W] or [H,W], got " + shape_str(im.shape()));
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

}  // namespace

double aepe(const Tensor& pred, const Tensor& gt, const Mask& mask) {
  const auto [h, w] = flow_hw(pred);
  if (flow_hw(gt) != std::pair{h, w}) {
    throw ShapeError("aepe: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(gt.shape()));
  }
  const std::size_t plane = h * w;
  if (mask.size() != plane) throw ShapeError("aepe: mask size does not match the flow");
  auto p = pred.values();
  auto g = gt.values();
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!mask[i]) continue;
    total += std::hypot(p[i] - g[i], p[plane + i] - g[plane + i]);
    ++n;
  }
  if (n == 0) throw ShapeError("aepe: empty mask");
  return total / static_cast<double>(n);
}

std::vector<double> default_thresholds() {
  std::vector<double> t(50);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.1 + 0.1 * static_cast<double>(i);
  return t;
}

EvalReport cmr_curve(const std::vector<double>& aepes, const std::vector<double>& thresholds) {
  if (aepes.empty()) throw ConfigError("cmr_curve: no samples");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw ConfigError("cmr_curve: thresholds must be sorted ascending");
  }
  EvalReport r;
  r.per_sample = aepes;
  double s = 0.0;
  for (double a : aepes) s += a;
  r.mean = s / static_cast<double>(aepes.size());
  r.thresholds = thresholds;
  std::vector<double> sorted = aepes;
  std::sort(sorted.begin(), sorted.end());
  for (double t : thresholds) {
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    r.cmr.push_back(100.0 * static_cast<double>(below) / static_cast<double>(aepes.size()));
  }
  return r;
}

json EvalReport::to_json() const {
  json j = {{"per_sample_aepe", per_sample},
            {"mean_aepe", mean},
            {"thresholds", thresholds},
            {"cmr", cmr},
            {"threshold_grid", {{"count", thresholds.size()},
                                {"lo", thresholds.empty() ? 0.0 : thresholds.front()},
                                {"hi", thresholds.empty() ? 0.0 : thresholds.back()}}}};
  if (!per_sample_coarse.empty()) {
    j["per_sample_aepe_coarse"] = per_sample_coarse;
    j["mean_aepe_coarse"] = mean_coarse;
  }
  if (!label.empty()) j["label"] = label;
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  try {
    r.per_sample = j.at("per_sample_aepe").get<std::vector<double>>();
    r.mean = j.at("mean_aepe").get<double>();
    r.thresholds = j.at("thresholds").get<std::vector<double>>();
    r.cmr = j.at("cmr").get<std::vector<double>>();
    r.per_sample_coarse = j.value("per_sample_aepe_coarse", std::vector<double>{});
    r.mean_coarse = j.value("mean_aepe_coarse", -1.0);
    r.label = j.value("label", std::string{});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("eval report: ") + e.what());
  }
  if (r.cmr.size() != r.thresholds.size()) throw ConfigError("eval report: cmr and thresholds differ in length");
  return r;
}

std::string EvalReport::cmr_csv() const {
  std::ostringstream os;
  os << "threshold,cmr\n";
  for (std::size_t i = 0; i < thresholds.size(); ++i) os << fmt(thresholds[i]) << ',' << fmt(cmr[i]) << '\n';
  return os.str();
}

std::string merge_cmr_csv(const std::vector<EvalReport>& reports, const std::vector<std::string>& names) {
  if (reports.empty()) throw ConfigError("report: no inputs");
  if (names.size() != reports.size()) throw ConfigError("report: one name per input is required");
  for (const auto& r : reports) {
    if (r.thresholds != reports.front().thresholds) throw ConfigError("report: threshold grids differ");
  }
  std::ostringstream os;
  os << "threshold";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  for (std::size_t i = 0; i < reports.front().thresholds.size(); ++i) {
    os << fmt(reports.front().thresholds[i]);
    for (const auto& r : reports) os << ',' << fmt(r.cmr[i]);
    os << '\n';
  }
  return os.str();
}

Tensor checkerboard_fuse(const Tensor& image_a, const Tensor& image_b, std::size_t tile) {
  const auto [h, w] = image_hw(image_a);
  if (image_hw(image_b) != std::pair{h, w}) {
    throw ShapeError("checkerboard_fuse: image sizes differ");
  }
  if (tile == 0 || tile > std::min(h, w)) {
    throw ConfigError("checkerboard_fuse: tile must be in [1, min(H,W)], got " + std::to_string(tile));
  }
  auto a = image_a.values();
  auto b = image_b.values();
  std::vector<double> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out[y * w + x] = ((y / tile + x / tile) % 2 == 0 ? a : b)[y * w + x];
    }
  }
  return Tensor(Shape{h, w}, std::move(out));
}

std::vector<double> flow_magnitude(const Tensor& flow) {
  const auto [h, w] = flow_hw(flow);
  auto v = flow.values();
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h * w; ++i) out[i] = std::hypot(v[i], v[h * w + i]);
  return out;
}

}  // namespace crft
