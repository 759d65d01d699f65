#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "crft/error.hpp"
#include "crft/fine_refine.hpp"
#include "crft/ops.hpp"
#include "support/oracles.hpp"

using namespace crft;
using crft::testing::random_tensor;

namespace {

PyramidFeatures random_pyramid(std::size_t hc, std::size_t wc, std::size_t c2, std::size_t c4,
                               std::mt19937_64& rng) {
  PyramidFeatures p;
  p.f_half = random_tensor({1, c2, 4 * hc, 4 * wc}, rng, -1, 1, false);
  p.f_quarter = random_tensor({1, c4, 2 * hc, 2 * wc}, rng, -1, 1, false);
  p.f_eighth = random_tensor({1, c4, hc, wc}, rng, -1, 1, false);
  return p;
}

// Value expected at window position t of window (i, j): side `n`, centre
// (s*i + o, s*j + o) on an h x w map; 0 with valid = false outside.
double window_oracle(const Tensor& map, std::size_t ch, std::size_t i, std::size_t j, std::size_t t,
                     std::size_t n, long s, long o, bool& valid) {
  const long h = static_cast<long>(map.size(2)), w = static_cast<long>(map.size(3));
  const long r = static_cast<long>(n / 2);
  const long y = s * static_cast<long>(i) + o - r + static_cast<long>(t / n);
  const long x = s * static_cast<long>(j) + o - r + static_cast<long>(t % n);
  valid = y >= 0 && x >= 0 && y < h && x < w;
  return valid ? map[(ch * h + y) * w + x] : 0.0;
}

void randomize(ParamStore& ps, std::mt19937_64& rng, double scale = 0.4) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& t : ps.tensors())
    for (double& v : t.mutable_values()) v = u(rng);
}

ParamStore fine_params(std::size_t c2, std::size_t c4, std::size_t cf, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore ps;
  add_fine_params(ps, c2, c4, cf, rng);
  return ps;
}

Tensor permute_windows(const Tensor& t, const std::vector<std::size_t>& perm) {
  const std::size_t per = t.numel() / t.size(0);
  std::vector<double> v(t.numel());
  for (std::size_t k = 0; k < perm.size(); ++k)
    for (std::size_t e = 0; e < per; ++e) v[k * per + e] = t[perm[k] * per + e];
  return Tensor(t.shape(), std::move(v));
}

nn::KeyMask permute_mask(const nn::KeyMask& m, std::size_t per, const std::vector<std::size_t>& perm) {
  auto out = std::make_shared<std::vector<std::uint8_t>>(m->size());
  for (std::size_t k = 0; k < perm.size(); ++k)
    for (std::size_t e = 0; e < per; ++e) (*out)[k * per + e] = (*m)[perm[k] * per + e];
  return out;
}

crft::testing::Rows rows_of(const Tensor& t, std::size_t k) {
  const std::size_t n = t.size(1), c = t.size(2);
  crft::testing::Rows r(n, std::vector<long double>(c));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < c; ++d) r[i][d] = t[(k * n + i) * c + d];
  return r;
}

crft::testing::AttentionWeights weights_of(const ParamStore& ps, const std::string& p) {
  auto v = [&](const std::string& s) {
    const Tensor& t = ps.get(p + s);
    return std::vector<double>(t.values().begin(), t.values().end());
  };
  return {v(".q.w"), v(".k.w"), v(".v.w"), v(".v.b"), v(".ff1.w"), v(".ff1.b"), v(".ff2.w"), v(".ff2.b")};
}

crft::testing::Rows dense_rows(const ParamStore& ps, const std::string& p, const crft::testing::Rows& x) {
  const Tensor& w = ps.get(p + ".w");
  const Tensor& b = ps.get(p + ".b");
  crft::testing::Rows out;
  for (const auto& r : x) {
    out.push_back(crft::testing::affine_oracle({w.values().begin(), w.values().end()},
                                               {b.values().begin(), b.values().end()}, r));
  }
  return out;
}

}  // namespace

TEST(WindowLayout, EntriesMatchIndexOracle) {
  std::mt19937_64 rng(1);
  const std::size_t hc = 3, wc = 4;
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(hc, wc));
  PyramidFeatures p = random_pyramid(hc, wc, 3, 2, rng);
  WindowSet ws = gather_windows(p, layout, 'A');
  EXPECT_EQ(ws.windows_5x5.shape(), (Shape{12, 25, 2}));
  EXPECT_EQ(ws.windows_3x3.shape(), (Shape{12, 9, 3}));
  EXPECT_EQ(ws.windows_half.shape(), (Shape{12, 25, 3}));
  for (std::size_t i = 0; i < hc; ++i)
    for (std::size_t j = 0; j < wc; ++j) {
      const std::size_t k = i * wc + j;
      bool valid = false;
      for (std::size_t t = 0; t < 25; ++t)
        for (std::size_t c = 0; c < 2; ++c) {
          const double e = window_oracle(p.f_quarter, c, i, j, t, 5, 2, 1, valid);
          EXPECT_EQ(ws.windows_5x5[(k * 25 + t) * 2 + c], e);
          EXPECT_EQ((*layout->quarter_mask)[k * 25 + t], valid ? 1 : 0);
        }
      for (std::size_t t = 0; t < 9; ++t)
        for (std::size_t c = 0; c < 3; ++c) {
          const double e = window_oracle(p.f_half, c, i, j, t, 3, 4, 2, valid);
          EXPECT_EQ(ws.windows_3x3[(k * 9 + t) * 3 + c], e);
          EXPECT_EQ((*layout->mid_mask)[k * 9 + t], valid ? 1 : 0);
        }
      for (std::size_t t = 0; t < 25; ++t)
        for (std::size_t c = 0; c < 3; ++c) {
          const double e = window_oracle(p.f_half, c, i, j, t, 5, 4, 2, valid);
          EXPECT_EQ(ws.windows_half[(k * 25 + t) * 3 + c], e);
          EXPECT_EQ((*layout->half_mask)[k * 25 + t], valid ? 1 : 0);
        }
    }
}

TEST(WindowLayout, ConstantMapsGiveConstantValidEntries) {
  const std::size_t hc = 2, wc = 2;
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(hc, wc));
  PyramidFeatures p;
  p.f_half = Tensor(Shape{1, 2, 8, 8}, 0.25);
  p.f_quarter = Tensor(Shape{1, 2, 4, 4}, -1.5);
  p.f_eighth = Tensor(Shape{1, 2, 2, 2}, 0.0);
  WindowSet ws = gather_windows(p, layout);
  for (std::size_t i = 0; i < 4 * 25; ++i) {
    const bool q = (*layout->quarter_mask)[i], h = (*layout->half_mask)[i];
    EXPECT_EQ(ws.windows_5x5[i * 2], q ? -1.5 : 0.0);
    EXPECT_EQ(ws.windows_half[i * 2 + 1], h ? 0.25 : 0.0);
  }
  for (std::size_t i = 0; i < 4 * 9; ++i) EXPECT_EQ(ws.windows_3x3[i * 2], 0.25);
}

TEST(WindowLayout, BorderWindowsAreMasked) {
  WindowLayout l = make_window_layout(8, 8);
  // Coarse (0,0): the 1/4 window starts at row/col -1.
  for (std::size_t t = 0; t < 25; ++t) {
    const bool border = t / 5 == 0 || t % 5 == 0;
    EXPECT_EQ((*l.quarter_mask)[t], border ? 0 : 1) << t;
    EXPECT_EQ((*l.half_mask)[t], 1);
  }
  // Coarse (7,7): the 1/2 window reaches row/col 32 on a 32x32 lattice.
  const std::size_t k = 63;
  for (std::size_t t = 0; t < 25; ++t) {
    const bool border = t / 5 == 4 || t % 5 == 4;
    EXPECT_EQ((*l.half_mask)[k * 25 + t], border ? 0 : 1) << t;
  }
}

TEST(WindowLayout, CoverageCountsOverlaps) {
  WindowLayout l = make_window_layout(2, 3);
  std::vector<double> count(l.h2 * l.w2, 0.0);
  for (auto s : l.half)
    if (s >= 0) count[static_cast<std::size_t>(s)] += 1.0;
  EXPECT_EQ(count, l.coverage);
  for (double c : l.coverage) EXPECT_GE(c, 1.0);
  // Row 4 and column 4 are shared by neighbouring windows.
  EXPECT_EQ(l.coverage[4 * l.w2 + 4], 4.0);
  EXPECT_EQ(l.coverage[1 * l.w2 + 1], 1.0);
}

TEST(HierarchicalFuse, ResidualIdentityReproducesProjection) {
  std::mt19937_64 rng(2);
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(2, 2));
  ParamStore ps = fine_params(4, 6, 8, 3);
  WindowSet wa = gather_windows(random_pyramid(2, 2, 4, 6, rng), layout, 'A');
  WindowSet wb = gather_windows(random_pyramid(2, 2, 4, 6, rng), layout, 'B');
  auto [fa, fb] = hierarchical_fuse(wa, wb, ps);
  Tensor pa = linear(wa.windows_half, ps.get("fine.proj_h.w"), ps.get("fine.proj_h.b"));
  Tensor pb = linear(wb.windows_half, ps.get("fine.proj_h.w"), ps.get("fine.proj_h.b"));
  ASSERT_EQ(fa.shape(), (Shape{4, 25, 8}));
  for (std::size_t i = 0; i < fa.numel(); ++i) {
    EXPECT_EQ(fa[i], pa[i]);
    EXPECT_EQ(fb[i], pb[i]);
  }
}

TEST(HierarchicalFuse, IdenticalInputsGiveIdenticalOutputs) {
  std::mt19937_64 rng(4);
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(2, 3));
  ParamStore ps = fine_params(4, 6, 8, 5);
  randomize(ps, rng);
  WindowSet w = gather_windows(random_pyramid(2, 3, 4, 6, rng), layout);
  auto [fa, fb] = hierarchical_fuse(w, w, ps);
  for (std::size_t i = 0; i < fa.numel(); ++i) EXPECT_EQ(fa[i], fb[i]);
}

TEST(HierarchicalFuse, WindowPermutationEquivariance) {
  std::mt19937_64 rng(6);
  const std::size_t hc = 2, wc = 3, k = 6;
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(hc, wc));
  ParamStore ps = fine_params(4, 6, 8, 7);
  randomize(ps, rng);
  WindowSet wa = gather_windows(random_pyramid(hc, wc, 4, 6, rng), layout);
  WindowSet wb = gather_windows(random_pyramid(hc, wc, 4, 6, rng), layout);
  auto [fa, fb] = hierarchical_fuse(wa, wb, ps);

  std::vector<std::size_t> perm = {4, 2, 0, 5, 1, 3};
  WindowLayout pl = *layout;
  pl.quarter_mask = permute_mask(layout->quarter_mask, 25, perm);
  pl.mid_mask = permute_mask(layout->mid_mask, 9, perm);
  pl.half_mask = permute_mask(layout->half_mask, 25, perm);
  pl.quarter_mid_mask = permute_mask(layout->quarter_mid_mask, 34, perm);
  auto play = std::make_shared<const WindowLayout>(pl);
  auto permuted = [&](const WindowSet& w) {
    WindowSet p = w;
    p.windows_5x5 = permute_windows(w.windows_5x5, perm);
    p.windows_3x3 = permute_windows(w.windows_3x3, perm);
    p.windows_half = permute_windows(w.windows_half, perm);
    p.layout = play;
    return p;
  };
  auto [ga, gb] = hierarchical_fuse(permuted(wa), permuted(wb), ps);
  Tensor ea = permute_windows(fa, perm), eb = permute_windows(fb, perm);
  ASSERT_EQ(ga.numel(), k * 25 * 8);
  for (std::size_t i = 0; i < ga.numel(); ++i) {
    EXPECT_NEAR(ga[i], ea[i], 1e-12);
    EXPECT_NEAR(gb[i], eb[i], 1e-12);
  }
}

TEST(HierarchicalFuse, PaddedPositionsDoNotLeak) {
  std::mt19937_64 rng(8);
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(2, 2));
  ParamStore ps = fine_params(4, 6, 8, 9);
  randomize(ps, rng);
  WindowSet wa = gather_windows(random_pyramid(2, 2, 4, 6, rng), layout);
  WindowSet wb = gather_windows(random_pyramid(2, 2, 4, 6, rng), layout);
  auto [fa, fb] = hierarchical_fuse(wa, wb, ps);
  auto scramble = [&](const Tensor& t, const nn::KeyMask& m) {
    std::vector<double> v(t.values().begin(), t.values().end());
    const std::size_t c = t.size(2);
    std::uniform_real_distribution<double> u(-5, 5);
    for (std::size_t i = 0; i < m->size(); ++i)
      if (!(*m)[i])
        for (std::size_t d = 0; d < c; ++d) v[i * c + d] = u(rng);
    return Tensor(t.shape(), std::move(v));
  };
  WindowSet sa = wa, sb = wb;
  sa.windows_5x5 = scramble(wa.windows_5x5, layout->quarter_mask);
  sb.windows_half = scramble(wb.windows_half, layout->half_mask);
  auto [ga, gb] = hierarchical_fuse(sa, sb, ps);
  const auto& hm = *layout->half_mask;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < hm.size(); ++i) {
    if (!hm[i]) continue;
    for (std::size_t d = 0; d < 8; ++d) {
      EXPECT_NEAR(ga[i * 8 + d], fa[i * 8 + d], 1e-12);
      EXPECT_NEAR(gb[i * 8 + d], fb[i * 8 + d], 1e-12);
    }
    ++checked;
  }
  EXPECT_GT(checked, 0u);
}

// One coarse pixel: every stage re-evaluated with the loop attention oracle.
TEST(HierarchicalFuse, SingleWindowMatchesManualChain) {
  std::mt19937_64 rng(10);
  auto layout = std::make_shared<const WindowLayout>(make_window_layout(1, 1));
  const std::size_t cf = 4;
  ParamStore ps = fine_params(3, 3, cf, 11);
  randomize(ps, rng);
  WindowSet wa = gather_windows(random_pyramid(1, 1, 3, 3, rng), layout);
  WindowSet wb = gather_windows(random_pyramid(1, 1, 3, 3, rng), layout);
  auto [fa, fb] = hierarchical_fuse(wa, wb, ps);

  using crft::testing::attention_oracle;
  const auto& l = *layout;
  const std::vector<std::uint8_t> qm(l.quarter_mask->begin(), l.quarter_mask->end());
  const std::vector<std::uint8_t> mm(l.mid_mask->begin(), l.mid_mask->end());
  const std::vector<std::uint8_t> hm(l.half_mask->begin(), l.half_mask->end());
  const std::vector<std::uint8_t> qmm(l.quarter_mid_mask->begin(), l.quarter_mid_mask->end());
  auto local = [&](const WindowSet& w, crft::testing::Rows& q, crft::testing::Rows& m, crft::testing::Rows& h) {
    q = dense_rows(ps, "fine.proj_q", rows_of(w.windows_5x5, 0));
    q = attention_oracle(q, q, weights_of(ps, "fine.sa_q"), qm);
    m = dense_rows(ps, "fine.proj_m", rows_of(w.windows_3x3, 0));
    m = attention_oracle(m, m, weights_of(ps, "fine.sa_m"), mm);
    h = dense_rows(ps, "fine.proj_h", rows_of(w.windows_half, 0));
    h = attention_oracle(h, h, weights_of(ps, "fine.sa_h"), hm);
  };
  crft::testing::Rows qa, ma, ha, qb, mb, hb;
  local(wa, qa, ma, ha);
  local(wb, qb, mb, hb);
  auto ma2 = attention_oracle(ma, mb, weights_of(ps, "fine.ca_m"), mm);
  auto mb2 = attention_oracle(mb, ma, weights_of(ps, "fine.ca_m"), mm);
  auto cat = [](crft::testing::Rows a, const crft::testing::Rows& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  auto ha2 = attention_oracle(ha, cat(qa, ma2), weights_of(ps, "fine.ca_fuse"), qmm);
  auto hb2 = attention_oracle(hb, cat(qb, mb2), weights_of(ps, "fine.ca_fuse"), qmm);
  auto ea = attention_oracle(ha2, hb2, weights_of(ps, "fine.ca_x"), hm);
  auto eb = attention_oracle(hb2, ha2, weights_of(ps, "fine.ca_x"), hm);
  for (std::size_t t = 0; t < 25; ++t)
    for (std::size_t d = 0; d < cf; ++d) {
      EXPECT_NEAR(fa[t * cf + d], static_cast<double>(ea[t][d]), 1e-10);
      EXPECT_NEAR(fb[t * cf + d], static_cast<double>(eb[t][d]), 1e-10);
    }
}

TEST(HierarchicalFuse, WindowCountMismatchRejected) {
  std::mt19937_64 rng(12);
  ParamStore ps = fine_params(4, 6, 8, 13);
  auto l1 = std::make_shared<const WindowLayout>(make_window_layout(1, 2));
  auto l2 = std::make_shared<const WindowLayout>(make_window_layout(2, 2));
  WindowSet a = gather_windows(random_pyramid(1, 2, 4, 6, rng), l1);
  WindowSet b = gather_windows(random_pyramid(2, 2, 4, 6, rng), l2);
  EXPECT_THROW(hierarchical_fuse(a, b, ps), ShapeError);
}
