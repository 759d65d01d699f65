#include "crft/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "crft/error.hpp"

namespace crft {

namespace {

std::atomic<std::uint64_t> g_node_seq{0};
thread_local bool g_grad_enabled = true;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) {
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

Tensor Tensor::from_impl(detail::ImplPtr impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const Shape& Tensor::shape() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::size(std::size_t d) const {
  const auto& s = shape();
  if (d >= s.size()) {
    throw ShapeError("dimension " + std::to_string(d) + " out of range for " +
                     shape_str(s));
  }
  return s[d];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::values() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_values() {
  if (!impl_) throw GraphError("use of an undefined tensor");
  if (impl_->node) throw GraphError("cannot mutate a tensor produced by a primitive");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_) throw GraphError("use of an undefined tensor");
  if (impl_->node) throw GraphError("requires_grad can only be set on leaves");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->node; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void Tensor::clear_grad() {
  if (impl_) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

Graph Graph::collect(const Tensor& root) {
  Graph g;
  if (!root.defined() || !root.impl()->node) return g;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::ImplPtr> stack{root.impl()};
  while (!stack.empty()) {
    detail::ImplPtr t = std::move(stack.back());
    stack.pop_back();
    detail::Node* n = t->node.get();
    if (!n || !seen.insert(n).second) continue;
    if (n->consumed) {
      throw GraphError(std::string("graph already consumed at primitive '") + n->op +
                       "'; re-run the forward pass before calling backward again");
    }
    for (const auto& in : n->inputs) stack.push_back(in);
    g.entries_.push_back({n, std::move(t)});
  }
  std::sort(g.entries_.begin(), g.entries_.end(),
            [](const Entry& a, const Entry& b) { return a.node->seq < b.node->seq; });
  return g;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on an undefined tensor");
  if (loss.numel() != 1) {
    throw GraphError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const auto& root = loss.impl();
  if (!root->requires_grad) return;
  if (!root->node) {
    if (root->grad.empty()) root->grad.assign(1, 0.0);
    root->grad[0] += 1.0;
    return;
  }
  if (root->node->consumed) {
    throw GraphError("graph already consumed; re-run the forward pass before calling backward again");
  }
  Graph g = Graph::collect(loss);
  root->grad.assign(1, 1.0);
  const auto& entries = g.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    detail::Node* n = it->node;
    detail::TensorImpl& out = *it->output;
    if (!out.grad.empty() && n->backward) n->backward(out.grad, out.data);
    out.grad.clear();
    out.grad.shrink_to_fit();
    n->consumed = true;
    n->backward = nullptr;
    n->inputs.clear();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

std::span<double> grad_sink(const ImplPtr& t) {
  if (!t->requires_grad) return {};
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn fn) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by primitive '") + op +
                         "' (output shape " + shape_str(shape) + ")");
    }
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    auto node = std::make_shared<Node>();
    node->seq = g_node_seq.fetch_add(1, std::memory_order_relaxed);
    node->op = op;
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->backward = std::move(fn);
    impl->requires_grad = true;
    impl->node = std::move(node);
  }
  return Tensor::from_impl(std::move(impl));
}

}  // namespace detail

}  // namespace crft
