#include "crft/fine_refine.hpp"

#include <algorithm>

#include "crft/error.hpp"
#include "crft/ops.hpp"

namespace crft {

namespace {

void fill_windows(std::vector<std::int64_t>& out, std::size_t hc, std::size_t wc, std::size_t side,
                  std::size_t stride, std::size_t offset, std::size_t h, std::size_t w) {
  const auto r = static_cast<std::ptrdiff_t>(side / 2);
  out.clear();
  for (std::size_t i = 0; i < hc; ++i) {
    for (std::size_t j = 0; j < wc; ++j) {
      const auto cy = static_cast<std::ptrdiff_t>(stride * i + offset);
      const auto cx = static_cast<std::ptrdiff_t>(stride * j + offset);
      for (std::ptrdiff_t u = -r; u <= r; ++u) {
        for (std::ptrdiff_t v = -r; v <= r; ++v) {
          const std::ptrdiff_t y = cy + u, x = cx + v;
          const bool ok = y >= 0 && x >= 0 && y < static_cast<std::ptrdiff_t>(h) &&
                          x < static_cast<std::ptrdiff_t>(w);
          out.push_back(ok ? y * static_cast<std::ptrdiff_t>(w) + x : -1);
        }
      }
    }
  }
}

nn::KeyMask mask_of(const std::vector<std::int64_t>& idx) {
  auto m = std::make_shared<std::vector<std::uint8_t>>(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) (*m)[i] = idx[i] >= 0 ? 1 : 0;
  return m;
}

}  // namespace

WindowLayout make_window_layout(std::size_t hc, std::size_t wc) {
  if (hc == 0 || wc == 0) throw ShapeError("window layout needs a non-empty coarse grid");
  WindowLayout l;
  l.hc = hc;
  l.wc = wc;
  l.k = hc * wc;
  l.h4 = 2 * hc;
  l.w4 = 2 * wc;
  l.h2 = 4 * hc;
  l.w2 = 4 * wc;
  fill_windows(l.quarter, hc, wc, kQuarterWindow, 2, 1, l.h4, l.w4);
  fill_windows(l.mid, hc, wc, kMidWindow, 4, 2, l.h2, l.w2);
  fill_windows(l.half, hc, wc, kFineWindow, 4, 2, l.h2, l.w2);
  l.quarter_mask = mask_of(l.quarter);
  l.mid_mask = mask_of(l.mid);
  l.half_mask = mask_of(l.half);
  auto qm = std::make_shared<std::vector<std::uint8_t>>();
  const std::size_t nq = kQuarterWindow * kQuarterWindow, nm = kMidWindow * kMidWindow;
  for (std::size_t k = 0; k < l.k; ++k) {
    qm->insert(qm->end(), l.quarter_mask->begin() + k * nq, l.quarter_mask->begin() + (k + 1) * nq);
    qm->insert(qm->end(), l.mid_mask->begin() + k * nm, l.mid_mask->begin() + (k + 1) * nm);
  }
  l.quarter_mid_mask = qm;

  const std::size_t n = kFineWindow * kFineWindow;
  const auto r = static_cast<double>(kFineWindow / 2);
  l.half_x.resize(l.k * n);
  l.half_y.resize(l.k * n);
  l.half_clamped.resize(l.k * n);
  l.coverage.assign(l.h2 * l.w2, 0.0);
  for (std::size_t i = 0; i < hc; ++i) {
    for (std::size_t j = 0; j < wc; ++j) {
      const std::size_t k = i * wc + j;
      for (std::size_t t = 0; t < n; ++t) {
        const double y = 4.0 * static_cast<double>(i) + 2.0 - r + static_cast<double>(t / kFineWindow);
        const double x = 4.0 * static_cast<double>(j) + 2.0 - r + static_cast<double>(t % kFineWindow);
        l.half_x[k * n + t] = x;
        l.half_y[k * n + t] = y;
        const auto yc = static_cast<std::int64_t>(std::clamp(y, 0.0, static_cast<double>(l.h2 - 1)));
        const auto xc = static_cast<std::int64_t>(std::clamp(x, 0.0, static_cast<double>(l.w2 - 1)));
        l.half_clamped[k * n + t] = yc * static_cast<std::int64_t>(l.w2) + xc;
        if (l.half[k * n + t] >= 0) l.coverage[static_cast<std::size_t>(l.half[k * n + t])] += 1.0;
      }
    }
  }
  return l;
}

Tensor gather_window_tokens(const Tensor& map, const std::vector<std::int64_t>& spatial, std::size_t n) {
  if (map.dim() != 4 || map.size(0) != 1) {
    throw ShapeError("gather_window_tokens: expected [1,C,H,W], got " + shape_str(map.shape()));
  }
  if (n == 0 || spatial.size() % n != 0) throw ShapeError("gather_window_tokens: ragged index table");
  const std::size_t c = map.size(1);
  const auto plane = static_cast<std::int64_t>(map.size(2) * map.size(3));
  const std::size_t k = spatial.size() / n;
  auto idx = std::make_shared<std::vector<std::int64_t>>(k * n * c);
  for (std::size_t i = 0; i < k * n; ++i) {
    const std::int64_t s = spatial[i];
    if (s >= plane) throw ShapeError("gather_window_tokens: index outside the map");
    for (std::size_t ch = 0; ch < c; ++ch) {
      (*idx)[i * c + ch] = s < 0 ? -1 : static_cast<std::int64_t>(ch) * plane + s;
    }
  }
  return gather(map, idx, {k, n, c});
}

WindowSet gather_windows(const PyramidFeatures& pyr, std::shared_ptr<const WindowLayout> layout,
                         char tag) {
  const WindowLayout& l = *layout;
  auto check = [](const Tensor& m, std::size_t h, std::size_t w, const char* what) {
    if (m.dim() != 4 || m.size(2) != h || m.size(3) != w) {
      throw ShapeError(std::string("gather_windows: ") + what + " map " + shape_str(m.shape()) +
                       " does not match the layout (" + std::to_string(h) + "x" + std::to_string(w) + ")");
    }
  };
  check(pyr.f_quarter, l.h4, l.w4, "1/4");
  check(pyr.f_half, l.h2, l.w2, "1/2");
  WindowSet ws;
  ws.windows_5x5 = gather_window_tokens(pyr.f_quarter, l.quarter, kQuarterWindow * kQuarterWindow);
  ws.windows_3x3 = gather_window_tokens(pyr.f_half, l.mid, kMidWindow * kMidWindow);
  ws.windows_half = gather_window_tokens(pyr.f_half, l.half, kFineWindow * kFineWindow);
  ws.layout = std::move(layout);
  ws.tag = tag;
  return ws;
}

void add_fine_params(ParamStore& ps, std::size_t c2, std::size_t c4, std::size_t cf,
                     std::mt19937_64& rng) {
  nn::add_dense(ps, "fine.proj_q", c4, cf, rng);
  nn::add_dense(ps, "fine.proj_m", c2, cf, rng);
  nn::add_dense(ps, "fine.proj_h", c2, cf, rng);
  for (const char* name : {"fine.sa_q", "fine.sa_m", "fine.ca_m", "fine.sa_h", "fine.ca_fuse", "fine.ca_x"}) {
    nn::add_attention(ps, name, cf, rng);
  }
}

std::pair<Tensor, Tensor> hierarchical_fuse(const WindowSet& wa, const WindowSet& wb,
                                            const ParamStore& ps) {
  if (wa.windows_half.size(0) != wb.windows_half.size(0)) {
    throw ShapeError("hierarchical_fuse: window counts differ (" +
                     std::to_string(wa.windows_half.size(0)) + " vs " +
                     std::to_string(wb.windows_half.size(0)) + ")");
  }
  const WindowLayout& l = *wa.layout;
  struct Streams {
    Tensor q, m, h;
  };
  auto local = [&](const WindowSet& ws) {
    Streams s;
    s.q = nn::dense(ps, "fine.proj_q", ws.windows_5x5);
    s.q = nn::attention(ps, "fine.sa_q", s.q, s.q, l.quarter_mask);
    s.m = nn::dense(ps, "fine.proj_m", ws.windows_3x3);
    s.m = nn::attention(ps, "fine.sa_m", s.m, s.m, l.mid_mask);
    s.h = nn::dense(ps, "fine.proj_h", ws.windows_half);
    s.h = nn::attention(ps, "fine.sa_h", s.h, s.h, l.half_mask);
    return s;
  };
  Streams a = local(wa);
  Streams b = local(wb);
  Tensor ma = nn::attention(ps, "fine.ca_m", a.m, b.m, l.mid_mask);
  Tensor mb = nn::attention(ps, "fine.ca_m", b.m, a.m, l.mid_mask);
  Tensor ha = nn::attention(ps, "fine.ca_fuse", a.h, concat({a.q, ma}, 1), l.quarter_mid_mask);
  Tensor hb = nn::attention(ps, "fine.ca_fuse", b.h, concat({b.q, mb}, 1), l.quarter_mid_mask);
  Tensor fa = nn::attention(ps, "fine.ca_x", ha, hb, l.half_mask);
  Tensor fb = nn::attention(ps, "fine.ca_x", hb, ha, l.half_mask);
  return {fa, fb};
}

}  // namespace crft
