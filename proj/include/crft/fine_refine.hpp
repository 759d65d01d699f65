#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <utility>
#include <vector>

#include "crft/encoder.hpp"
#include "crft/nn.hpp"
#include "crft/params.hpp"

namespace crft {

inline constexpr std::size_t kQuarterWindow = 5;
inline constexpr std::size_t kMidWindow = 3;
// W_f: side of the refinement windows on the 1/2 lattice.
inline constexpr std::size_t kFineWindow = 5;

// Index bookkeeping for the per-coarse-pixel windows of a Hc x Wc coarse
// grid. Coarse pixel k = i*Wc + j anchors
//   a 5x5 window on the 1/4 map centred at (2i+1, 2j+1),
//   a 3x3 window on the 1/2 map centred at (4i+2, 4j+2),
//   a 5x5 window on the 1/2 map centred at (4i+2, 4j+2).
// Neighbouring 1/2 windows overlap by one row/column. Positions outside the
// map are recorded as -1 and masked.
struct WindowLayout {
  std::size_t hc = 0, wc = 0, k = 0;
  std::size_t h4 = 0, w4 = 0, h2 = 0, w2 = 0;
  std::vector<std::int64_t> quarter;  // [K*25] flat y*w4+x or -1
  std::vector<std::int64_t> mid;      // [K*9]
  std::vector<std::int64_t> half;     // [K*25]
  nn::KeyMask quarter_mask, mid_mask, half_mask, quarter_mid_mask;  // 1 = valid
  // Unclamped 1/2-lattice coordinates of each half-window position.
  std::vector<double> half_x, half_y;
  // Nearest in-bounds 1/2 pixel of each half-window position.
  std::vector<std::int64_t> half_clamped;
  // Number of valid half-window positions covering each 1/2 pixel.
  std::vector<double> coverage;
};

WindowLayout make_window_layout(std::size_t hc, std::size_t wc);

// Tokens [K,n,C] read from map [1,C,H,W] at flat spatial indices (n per
// window, -1 reads zero).
Tensor gather_window_tokens(const Tensor& map, const std::vector<std::int64_t>& spatial, std::size_t n);

// Windows are stored token-major, [K, n, C] with n = side*side in row-major
// window order, which is the layout the attention blocks consume.
struct WindowSet {
  Tensor windows_5x5;   // [K,25,C4] from the 1/4 map
  Tensor windows_3x3;   // [K,9,C2] from the 1/2 map
  Tensor windows_half;  // [K,25,C2] from the 1/2 map
  std::shared_ptr<const WindowLayout> layout;
  char tag = 'A';
};

WindowSet gather_windows(const PyramidFeatures& pyr, std::shared_ptr<const WindowLayout> layout,
                         char tag = 'A');

void add_fine_params(ParamStore& ps, std::size_t c2, std::size_t c4, std::size_t cf,
                     std::mt19937_64& rng);

// Projects each window set to width C_f, then
//   SA on 5x5 (1/4) windows; SA on 3x3 windows, CA between A and B 3x3 windows;
//   SA on the half windows, CA from the half windows onto [5x5; 3x3] of the
//   same image, CA between A and B half windows.
// Returns fine window features [K,25,C_f] for A and B.
std::pair<Tensor, Tensor> hierarchical_fuse(const WindowSet& wa, const WindowSet& wb,
                                            const ParamStore& ps);

}  // namespace crft
