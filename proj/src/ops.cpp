#include "crft/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "crft/error.hpp"

namespace crft {

using detail::grad_sink;
using detail::ImplPtr;
using detail::make_result;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + shape_str(sa) + " vs " +
                     shape_str(sb));
  }
  for (std::size_t d = 0; d < sa.size(); ++d) {
    if (sa[d] != sb[d]) {
      throw ShapeError(std::string(op) + ": dimension " + std::to_string(d) + " differs (" +
                       std::to_string(sa[d]) + " vs " + std::to_string(sb[d]) + ") in " +
                       shape_str(sa) + " vs " + shape_str(sb));
    }
  }
}

void require_rank(const char* op, const Tensor& t, std::size_t rank, const char* what) {
  if (t.dim() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

// Elementwise map with derivative expressed through (x, y).
template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd f, Deriv d) {
  auto xs = x.values();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  ImplPtr xi = x.impl();
  return make_result(op, x.shape(), std::move(out), {x},
                     [xi, d](std::span<const double> g, std::span<const double> y) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       const auto& xv = xi->data;
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * d(xv[i], y[i]);
                     });
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result("add", a.shape(), std::move(out), {a, b},
                     [ai, bi](std::span<const double> g, std::span<const double>) {
                       for (const auto& t : {ai, bi}) {
                         auto gt = grad_sink(t);
                         for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result("sub", a.shape(), std::move(out), {a, b},
                     [ai, bi](std::span<const double> g, std::span<const double>) {
                       auto ga = grad_sink(ai);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                       auto gb = grad_sink(bi);
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result("mul", a.shape(), std::move(out), {a, b},
                     [ai, bi](std::span<const double> g, std::span<const double>) {
                       auto ga = grad_sink(ai);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bi->data[i];
                       auto gb = grad_sink(bi);
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ai->data[i];
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  auto av = a.values(), bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result("div", a.shape(), std::move(out), {a, b},
                     [ai, bi](std::span<const double> g, std::span<const double> y) {
                       auto ga = grad_sink(ai);
                       for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / bi->data[i];
                       auto gb = grad_sink(bi);
                       for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i] * y[i] / bi->data[i];
                     });
}

Tensor scale(const Tensor& x, double s) {
  return unary("scale", x, [s](double v) { return v * s; },
               [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary("add_scalar", x, [s](double v) { return v + s; },
               [](double, double) { return 1.0; });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) {
    throw ShapeError("scale_by: factor must hold one value, got " + shape_str(s.shape()));
  }
  const double k = s.item();
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * k;
  ImplPtr xi = x.impl(), si = s.impl();
  return make_result("scale_by", x.shape(), std::move(out), {x, s},
                     [xi, si](std::span<const double> g, std::span<const double>) {
                       const double k = si->data[0];
                       auto gx = grad_sink(xi);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * k;
                       auto gs = grad_sink(si);
                       if (!gs.empty()) {
                         double acc = 0.0;
                         for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xi->data[i];
                         gs[0] += acc;
                       }
                     });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      "gelu", x,
      [](double v) {
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5 * v * (1.0 + t);
      },
      [](double v, double) {
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * dt;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& x) {
  return unary("abs", x, [](double v) { return std::fabs(v); },
               [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  ImplPtr xi = x.impl();
  return make_result("sum", Shape{1}, {acc}, {x},
                     [xi](std::span<const double> g, std::span<const double>) {
                       auto gx = grad_sink(xi);
                       for (double& v : gx) v += g[0];
                     });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor l1_norm(const Tensor& x) { return sum(abs(x)); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xv = x.values();
  std::vector<double> out(xv.begin(), xv.end());
  ImplPtr xi = x.impl();
  return make_result("reshape", std::move(shape), std::move(out), {x},
                     [xi](std::span<const double> g, std::span<const double>) {
                       auto gx = grad_sink(xi);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (perm.size() != rank) {
    throw ShapeError("permute: got " + std::to_string(perm.size()) + " axes for " + shape_str(in));
  }
  std::vector<bool> used(rank, false);
  for (std::size_t p : perm) {
    if (p >= rank || used[p]) throw ShapeError("permute: invalid axis order for " + shape_str(in));
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t d = 0; d < rank; ++d) out_shape[d] = in[perm[d]];
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * in[d];
  // src[i] = flat input index of flat output element i
  auto src = std::make_shared<std::vector<std::size_t>>(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t i = 0; i < src->size(); ++i) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < rank; ++d) off += idx[d] * in_strides[perm[d]];
    (*src)[i] = off;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  auto xv = x.values();
  std::vector<double> out(src->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[(*src)[i]];
  ImplPtr xi = x.impl();
  return make_result("permute", std::move(out_shape), std::move(out), {x},
                     [xi, src](std::span<const double> g, std::span<const double>) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < g.size(); ++i) gx[(*src)[i]] += g[i];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t dim) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (dim >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[dim] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(s));
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != dim && s[d] != first[d]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " differs (" +
                         std::to_string(s[d]) + " vs " + std::to_string(first[d]) + ")");
      }
    }
    out_shape[dim] += s[dim];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < dim; ++d) outer *= first[d];
  for (std::size_t d = dim + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_block = out_shape[dim] * inner;
  std::vector<double> out(outer * out_block);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t blk = p.shape()[dim] * inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * blk, blk, out.begin() + o * out_block + off);
    }
    off += blk;
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return make_result(
      "concat", std::move(out_shape), std::move(out), parts,
      [impls, offsets, outer, out_block, inner, dim](std::span<const double> g,
                                                      std::span<const double>) {
        for (std::size_t k = 0; k < impls.size(); ++k) {
          auto gp = grad_sink(impls[k]);
          if (gp.empty()) continue;
          const std::size_t blk = impls[k]->shape[dim] * inner;
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t j = 0; j < blk; ++j) gp[o * blk + j] += g[o * out_block + offsets[k] + j];
          }
        }
      });
}

Tensor gather(const Tensor& x, const IndexMap& index, Shape out_shape) {
  if (!index || index->size() != shape_numel(out_shape)) {
    throw ShapeError("gather: index table size does not match output " + shape_str(out_shape));
  }
  auto xv = x.values();
  const auto n = static_cast<std::int64_t>(xv.size());
  std::vector<double> out(index->size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::int64_t j = (*index)[i];
    if (j >= n) throw ShapeError("gather: index " + std::to_string(j) + " out of range");
    if (j >= 0) out[i] = xv[static_cast<std::size_t>(j)];
  }
  ImplPtr xi = x.impl();
  return make_result("gather", std::move(out_shape), std::move(out), {x},
                     [xi, index](std::span<const double> g, std::span<const double>) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const std::int64_t j = (*index)[i];
                         if (j >= 0) gx[static_cast<std::size_t>(j)] += g[i];
                       }
                     });
}

Tensor scatter_add(const Tensor& x, const IndexMap& index, Shape out_shape) {
  if (!index || index->size() != x.numel()) {
    throw ShapeError("scatter_add: index table size does not match input " + shape_str(x.shape()));
  }
  const auto n = static_cast<std::int64_t>(shape_numel(out_shape));
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const std::int64_t j = (*index)[i];
    if (j >= n) throw ShapeError("scatter_add: index " + std::to_string(j) + " out of range");
    if (j >= 0) out[static_cast<std::size_t>(j)] += xv[i];
  }
  ImplPtr xi = x.impl();
  return make_result("scatter_add", std::move(out_shape), std::move(out), {x},
                     [xi, index](std::span<const double> g, std::span<const double>) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       for (std::size_t i = 0; i < gx.size(); ++i) {
                         const std::int64_t j = (*index)[i];
                         if (j >= 0) gx[i] += g[static_cast<std::size_t>(j)];
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_rank("linear", w, 2, "weight");
  const std::size_t cout = w.size(0), cin = w.size(1);
  if (x.dim() == 0 || x.shape().back() != cin) {
    throw ShapeError("linear: input last dimension " +
                     std::to_string(x.dim() ? x.shape().back() : 0) + " does not match weight in-features " +
                     std::to_string(cin));
  }
  if (b.defined() && (b.dim() != 1 || b.size(0) != cout)) {
    throw ShapeError("linear: bias must be [" + std::to_string(cout) + "], got " + shape_str(b.shape()));
  }
  const std::size_t rows = x.numel() / cin;
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  std::vector<double> out(rows * cout);
  CMatMap X(x.values().data(), rows, cin);
  CMatMap W(w.values().data(), cout, cin);
  MatMap Y(out.data(), rows, cout);
  Y.noalias() = X * W.transpose();
  if (b.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> B(b.values().data(), cout);
    Y.rowwise() += B;
  }
  ImplPtr xi = x.impl(), wi = w.impl(), bi = b.defined() ? b.impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result(
      "linear", std::move(out_shape), std::move(out), inputs,
      [xi, wi, bi, rows, cin, cout](std::span<const double> g, std::span<const double>) {
        CMatMap G(g.data(), rows, cout);
        CMatMap X(xi->data.data(), rows, cin);
        CMatMap W(wi->data.data(), cout, cin);
        if (auto gx = grad_sink(xi); !gx.empty()) MatMap(gx.data(), rows, cin).noalias() += G * W;
        if (auto gw = grad_sink(wi); !gw.empty()) {
          MatMap(gw.data(), cout, cin).noalias() += G.transpose() * X;
        }
        if (bi) {
          if (auto gb = grad_sink(bi); !gb.empty()) {
            Eigen::Map<Eigen::RowVectorXd>(gb.data(), cout) += G.colwise().sum();
          }
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  if (a.dim() != b.dim() || (a.dim() != 2 && a.dim() != 3)) {
    throw ShapeError("matmul: operands must both be rank 2 or rank 3, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const bool batched = a.dim() == 3;
  const std::size_t batch = batched ? a.size(0) : 1;
  if (batched && b.size(0) != batch) {
    throw ShapeError("matmul: dimension 0 (batch) differs (" + std::to_string(batch) + " vs " +
                     std::to_string(b.size(0)) + ")");
  }
  const std::size_t ar = a.size(a.dim() - 2), ac = a.size(a.dim() - 1);
  const std::size_t br = b.size(b.dim() - 2), bc = b.size(b.dim() - 1);
  const std::size_t m = transpose_a ? ac : ar, k = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br, n = transpose_b ? br : bc;
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(k) + " vs " +
                     std::to_string(kb) + ") for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(batch * m * n);
  auto av = a.values(), bv = b.values();
  for (std::size_t t = 0; t < batch; ++t) {
    CMatMap A(av.data() + t * ar * ac, ar, ac);
    CMatMap B(bv.data() + t * br * bc, br, bc);
    MatMap C(out.data() + t * m * n, m, n);
    if (!transpose_a && !transpose_b) C.noalias() = A * B;
    else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
    else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [ai, bi, batch, ar, ac, br, bc, m, n, transpose_a, transpose_b](std::span<const double> g,
                                                                      std::span<const double>) {
        auto ga = grad_sink(ai);
        auto gb = grad_sink(bi);
        for (std::size_t t = 0; t < batch; ++t) {
          CMatMap G(g.data() + t * m * n, m, n);
          CMatMap A(ai->data.data() + t * ar * ac, ar, ac);
          CMatMap B(bi->data.data() + t * br * bc, br, bc);
          if (!ga.empty()) {
            MatMap GA(ga.data() + t * ar * ac, ar, ac);
            if (!transpose_a) {
              if (!transpose_b) GA.noalias() += G * B.transpose();
              else GA.noalias() += G * B;
            } else {
              if (!transpose_b) GA.noalias() += B * G.transpose();
              else GA.noalias() += B.transpose() * G.transpose();
            }
          }
          if (!gb.empty()) {
            MatMap GB(gb.data() + t * br * bc, br, bc);
            if (!transpose_b) {
              if (!transpose_a) GB.noalias() += A.transpose() * G;
              else GB.noalias() += A * G;
            } else {
              if (!transpose_a) GB.noalias() += G.transpose() * A;
              else GB.noalias() += G.transpose() * A.transpose();
            }
          }
        }
      });
}

namespace {

// Shared softmax body; `mask` may be null.
Tensor softmax_impl(const char* op, const Tensor& x,
                    std::shared_ptr<const std::vector<std::uint8_t>> mask,
                    std::size_t rows_per_group) {
  if (x.dim() == 0 || x.shape().back() == 0) throw ShapeError(std::string(op) + ": empty last dimension");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  if (mask) {
    if (rows_per_group == 0 || rows % rows_per_group != 0 ||
        mask->size() != (rows / rows_per_group) * k) {
      throw ShapeError(std::string(op) + ": key mask of size " + std::to_string(mask->size()) +
                       " does not fit scores " + shape_str(x.shape()));
    }
  }
  auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * k;
    double* o = out.data() + r * k;
    const std::uint8_t* mk = mask ? mask->data() + (r / rows_per_group) * k : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) {
      if (!mk || mk[j]) mx = std::max(mx, in[j]);
    }
    if (!std::isfinite(mx)) {
      throw NumericError(std::string(op) + ": row " + std::to_string(r) + " has no unmasked keys");
    }
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      if (!mk || mk[j]) {
        o[j] = std::exp(in[j] - mx);
        s += o[j];
      }
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= s;
  }
  ImplPtr xi = x.impl();
  return make_result(op, x.shape(), std::move(out), {x},
                     [xi, rows, k](std::span<const double> g, std::span<const double> y) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* yr = y.data() + r * k;
                         const double* gr = g.data() + r * k;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < k; ++j) dot += gr[j] * yr[j];
                         for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += yr[j] * (gr[j] - dot);
                       }
                     });
}

}  // namespace

Tensor softmax_lastdim(const Tensor& x) { return softmax_impl("softmax_lastdim", x, nullptr, 1); }

Tensor masked_softmax_lastdim(const Tensor& x,
                              std::shared_ptr<const std::vector<std::uint8_t>> key_mask,
                              std::size_t rows_per_group) {
  return softmax_impl("masked_softmax_lastdim", x, std::move(key_mask), rows_per_group);
}

Tensor layer_norm_lastdim(const Tensor& x, double eps) {
  if (x.dim() == 0 || x.shape().back() == 0) throw ShapeError("layer_norm: empty last dimension");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  auto xv = x.values();
  std::vector<double> out(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * k;
    double mu = 0.0;
    for (std::size_t j = 0; j < k; ++j) mu += in[j];
    mu /= static_cast<double>(k);
    double var = 0.0;
    for (std::size_t j = 0; j < k; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(k);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = (in[j] - mu) * rs;
  }
  ImplPtr xi = x.impl();
  return make_result("layer_norm", x.shape(), std::move(out), {x},
                     [xi, rstd, rows, k](std::span<const double> g, std::span<const double> y) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       const double inv_k = 1.0 / static_cast<double>(k);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* yr = y.data() + r * k;
                         const double* gr = g.data() + r * k;
                         double mg = 0.0, mgy = 0.0;
                         for (std::size_t j = 0; j < k; ++j) {
                           mg += gr[j];
                           mgy += gr[j] * yr[j];
                         }
                         mg *= inv_k;
                         mgy *= inv_k;
                         for (std::size_t j = 0; j < k; ++j) {
                           gx[r * k + j] += (*rstd)[r] * (gr[j] - mg - yr[j] * mgy);
                         }
                       }
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding) {
  require_rank("conv2d", x, 4, "input");
  require_rank("conv2d", w, 4, "kernel");
  const std::size_t n = x.size(0), cin = x.size(1), h = x.size(2), wd = x.size(3);
  const std::size_t cout = w.size(0), kh = w.size(2), kw = w.size(3);
  if (w.size(1) != cin) {
    throw ShapeError("conv2d: dimension 1 (input channels) differs: input has " +
                     std::to_string(cin) + ", kernel expects " + std::to_string(w.size(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(kh) + "x" +
                     std::to_string(kw));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  if (h + 2 * padding < kh || wd + 2 * padding < kw) {
    throw ShapeError("conv2d: dimension 2/3 (spatial) " + std::to_string(h) + "x" +
                     std::to_string(wd) + " too small for kernel " + std::to_string(kh) + "x" +
                     std::to_string(kw) + " with padding " + std::to_string(padding));
  }
  if (b.defined() && (b.dim() != 1 || b.size(0) != cout)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(cout) + "], got " + shape_str(b.shape()));
  }
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * padding - kw) / stride + 1;
  const std::size_t plane = ho * wo;
  const std::size_t krows = cin * kh * kw;
  const std::size_t ncols = n * plane;

  // im2col: rows = (c, ky, kx), cols = (image, oy, ox)
  auto cols = std::make_shared<std::vector<double>>(krows * ncols, 0.0);
  auto xv = x.values();
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* row = cols->data() + ((c * kh + ky) * kw + kx) * ncols;
        for (std::size_t img = 0; img < n; ++img) {
          const double* src = xv.data() + (img * cin + c) * h * wd;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              row[img * plane + oy * wo + ox] = src[iy * static_cast<std::ptrdiff_t>(wd) + ix];
            }
          }
        }
      }
    }
  }
  RowMat prod(cout, ncols);
  prod.noalias() = CMatMap(w.values().data(), cout, krows) * CMatMap(cols->data(), krows, ncols);
  std::vector<double> out(n * cout * plane);
  for (std::size_t img = 0; img < n; ++img) {
    for (std::size_t o = 0; o < cout; ++o) {
      const double bias = b.defined() ? b.values()[o] : 0.0;
      const double* src = prod.data() + o * ncols + img * plane;
      double* dst = out.data() + (img * cout + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias;
    }
  }
  ImplPtr xi = x.impl(), wi = w.impl(), bi = b.defined() ? b.impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_result(
      "conv2d", Shape{n, cout, ho, wo}, std::move(out), inputs,
      [=](std::span<const double> g, std::span<const double>) {
        // Reorder grad_out into [cout, (image, oy, ox)].
        RowMat gm(cout, ncols);
        for (std::size_t img = 0; img < n; ++img) {
          for (std::size_t o = 0; o < cout; ++o) {
            const double* src = g.data() + (img * cout + o) * plane;
            std::copy_n(src, plane, gm.data() + o * ncols + img * plane);
          }
        }
        if (bi) {
          if (auto gb = grad_sink(bi); !gb.empty()) {
            for (std::size_t o = 0; o < cout; ++o) gb[o] += gm.row(o).sum();
          }
        }
        if (auto gw = grad_sink(wi); !gw.empty()) {
          MatMap(gw.data(), cout, krows).noalias() +=
              gm * CMatMap(cols->data(), krows, ncols).transpose();
        }
        auto gx = grad_sink(xi);
        if (gx.empty()) return;
        RowMat gcols(krows, ncols);
        gcols.noalias() = CMatMap(wi->data.data(), cout, krows).transpose() * gm;
        for (std::size_t c = 0; c < cin; ++c) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const double* row = gcols.data() + ((c * kh + ky) * kw + kx) * ncols;
              for (std::size_t img = 0; img < n; ++img) {
                double* dst = gx.data() + (img * cin + c) * h * wd;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - pad;
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - pad;
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                    dst[iy * static_cast<std::ptrdiff_t>(wd) + ix] += row[img * plane + oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

namespace {

struct SampleTap {
  std::size_t x0, x1, y0, y1;
  double wx, wy;
  bool clamp_x, clamp_y;
};

SampleTap make_tap(double x, double y, std::size_t w, std::size_t h) {
  SampleTap t{};
  const double xmax = static_cast<double>(w - 1), ymax = static_cast<double>(h - 1);
  t.clamp_x = x < 0.0 || x > xmax;
  t.clamp_y = y < 0.0 || y > ymax;
  const double xc = std::clamp(x, 0.0, xmax);
  const double yc = std::clamp(y, 0.0, ymax);
  t.x0 = static_cast<std::size_t>(std::floor(xc));
  t.y0 = static_cast<std::size_t>(std::floor(yc));
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.wx = xc - static_cast<double>(t.x0);
  t.wy = yc - static_cast<double>(t.y0);
  return t;
}

}  // namespace

Tensor bilinear_sample(const Tensor& map, const Tensor& coords,
                       std::vector<std::uint8_t>* out_of_bounds) {
  require_rank("bilinear_sample", map, 4, "map");
  require_rank("bilinear_sample", coords, 4, "coords");
  const std::size_t nmap = map.size(0), c = map.size(1), h = map.size(2), w = map.size(3);
  const std::size_t m = coords.size(0), oh = coords.size(2), ow = coords.size(3);
  if (coords.size(1) != 2) {
    throw ShapeError("bilinear_sample: dimension 1 of coords must be 2 (x,y), got " +
                     std::to_string(coords.size(1)));
  }
  if (nmap != m && nmap != 1) {
    throw ShapeError("bilinear_sample: dimension 0 differs (map " + std::to_string(nmap) +
                     ", coords " + std::to_string(m) + ")");
  }
  const std::size_t plane = oh * ow;
  auto taps = std::make_shared<std::vector<SampleTap>>(m * plane);
  auto cv = coords.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < plane; ++p) {
      (*taps)[i * plane + p] =
          make_tap(cv[(i * 2) * plane + p], cv[(i * 2 + 1) * plane + p], w, h);
    }
  }
  if (out_of_bounds) {
    out_of_bounds->resize(m * plane);
    for (std::size_t i = 0; i < taps->size(); ++i) {
      (*out_of_bounds)[i] = ((*taps)[i].clamp_x || (*taps)[i].clamp_y) ? 1 : 0;
    }
  }
  auto mv = map.values();
  std::vector<double> out(m * c * plane);
  for (std::size_t i = 0; i < m; ++i) {
    const double* base = mv.data() + (nmap == 1 ? 0 : i) * c * h * w;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = base + ch * h * w;
      double* dst = out.data() + (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const SampleTap& t = (*taps)[i * plane + p];
        const double top = (1.0 - t.wx) * src[t.y0 * w + t.x0] + t.wx * src[t.y0 * w + t.x1];
        const double bot = (1.0 - t.wx) * src[t.y1 * w + t.x0] + t.wx * src[t.y1 * w + t.x1];
        dst[p] = (1.0 - t.wy) * top + t.wy * bot;
      }
    }
  }
  ImplPtr mi = map.impl(), ci = coords.impl();
  return make_result(
      "bilinear_sample", Shape{m, c, oh, ow}, std::move(out), {map, coords},
      [=](std::span<const double> g, std::span<const double>) {
        auto gmap = grad_sink(mi);
        auto gco = grad_sink(ci);
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t moff = (nmap == 1 ? 0 : i) * c * h * w;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double* src = mi->data.data() + moff + ch * h * w;
            const double* gr = g.data() + (i * c + ch) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              const SampleTap& t = (*taps)[i * plane + p];
              const double gv = gr[p];
              if (!gmap.empty()) {
                double* gm = gmap.data() + moff + ch * h * w;
                gm[t.y0 * w + t.x0] += gv * (1.0 - t.wy) * (1.0 - t.wx);
                gm[t.y0 * w + t.x1] += gv * (1.0 - t.wy) * t.wx;
                gm[t.y1 * w + t.x0] += gv * t.wy * (1.0 - t.wx);
                gm[t.y1 * w + t.x1] += gv * t.wy * t.wx;
              }
              if (!gco.empty()) {
                const double v00 = src[t.y0 * w + t.x0], v01 = src[t.y0 * w + t.x1];
                const double v10 = src[t.y1 * w + t.x0], v11 = src[t.y1 * w + t.x1];
                if (!t.clamp_x && t.x1 != t.x0) {
                  gco[(i * 2) * plane + p] +=
                      gv * ((1.0 - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
                }
                if (!t.clamp_y && t.y1 != t.y0) {
                  gco[(i * 2 + 1) * plane + p] +=
                      gv * ((1.0 - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                }
              }
            }
          }
        }
      });
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank("resize_bilinear", x, 4, "input");
  const std::size_t n = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear: empty output size");
  struct Axis {
    std::size_t i0, i1;
    double f;
  };
  auto axis = [](std::size_t in, std::size_t out) {
    std::vector<Axis> t(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      const double s = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0,
                                  static_cast<double>(in - 1));
      t[o].i0 = static_cast<std::size_t>(std::floor(s));
      t[o].i1 = std::min(t[o].i0 + 1, in - 1);
      t[o].f = s - static_cast<double>(t[o].i0);
    }
    return t;
  };
  auto ys = std::make_shared<std::vector<Axis>>(axis(h, out_h));
  auto xs = std::make_shared<std::vector<Axis>>(axis(w, out_w));
  auto xv = x.values();
  std::vector<double> out(n * c * out_h * out_w);
  for (std::size_t pl = 0; pl < n * c; ++pl) {
    const double* src = xv.data() + pl * h * w;
    double* dst = out.data() + pl * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const Axis& ay = (*ys)[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const Axis& ax = (*xs)[ox];
        const double top = (1.0 - ax.f) * src[ay.i0 * w + ax.i0] + ax.f * src[ay.i0 * w + ax.i1];
        const double bot = (1.0 - ax.f) * src[ay.i1 * w + ax.i0] + ax.f * src[ay.i1 * w + ax.i1];
        dst[oy * out_w + ox] = (1.0 - ay.f) * top + ay.f * bot;
      }
    }
  }
  ImplPtr xi = x.impl();
  return make_result("resize_bilinear", Shape{n, c, out_h, out_w}, std::move(out), {x},
                     [=](std::span<const double> g, std::span<const double>) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       for (std::size_t pl = 0; pl < n * c; ++pl) {
                         double* dst = gx.data() + pl * h * w;
                         const double* gr = g.data() + pl * out_h * out_w;
                         for (std::size_t oy = 0; oy < out_h; ++oy) {
                           const Axis& ay = (*ys)[oy];
                           for (std::size_t ox = 0; ox < out_w; ++ox) {
                             const Axis& ax = (*xs)[ox];
                             const double gv = gr[oy * out_w + ox];
                             dst[ay.i0 * w + ax.i0] += gv * (1.0 - ay.f) * (1.0 - ax.f);
                             dst[ay.i0 * w + ax.i1] += gv * (1.0 - ay.f) * ax.f;
                             dst[ay.i1 * w + ax.i0] += gv * ay.f * (1.0 - ax.f);
                             dst[ay.i1 * w + ax.i1] += gv * ay.f * ax.f;
                           }
                         }
                       }
                     });
}

Tensor minmax_normalize_rows(const Tensor& x) {
  require_rank("minmax_normalize_rows", x, 2, "input");
  const std::size_t rows = x.size(0), k = x.size(1);
  if (k == 0) throw ShapeError("minmax_normalize_rows: empty rows");
  struct RowStat {
    std::size_t argmin, argmax;
    double range;
  };
  auto stats = std::make_shared<std::vector<RowStat>>(rows);
  auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * k;
    std::size_t lo = 0, hi = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (in[j] < in[lo]) lo = j;
      if (in[j] > in[hi]) hi = j;
    }
    const double range = in[hi] - in[lo];
    (*stats)[r] = {lo, hi, range};
    if (range < 1e-12) continue;
    for (std::size_t j = 0; j < k; ++j) out[r * k + j] = (in[j] - in[lo]) / range;
  }
  ImplPtr xi = x.impl();
  return make_result("minmax_normalize_rows", x.shape(), std::move(out), {x},
                     [xi, stats, rows, k](std::span<const double> g, std::span<const double> y) {
                       auto gx = grad_sink(xi);
                       if (gx.empty()) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const RowStat& st = (*stats)[r];
                         if (st.range < 1e-12) continue;
                         const double inv = 1.0 / st.range;
                         double to_min = 0.0, to_max = 0.0;
                         for (std::size_t j = 0; j < k; ++j) {
                           const double gj = g[r * k + j], yj = y[r * k + j];
                           gx[r * k + j] += gj * inv;
                           to_min += gj * (yj - 1.0) * inv;
                           to_max -= gj * yj * inv;
                         }
                         gx[r * k + st.argmin] += to_min;
                         gx[r * k + st.argmax] += to_max;
                       }
                     });
}

}  // namespace crft
