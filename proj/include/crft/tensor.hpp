#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace crft {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty when no gradient has been accumulated.
  std::vector<double> grad;
  bool requires_grad = false;
  // Producer of this tensor; null for leaves.
  std::shared_ptr<Node> node;
};

using ImplPtr = std::shared_ptr<TensorImpl>;

// Receives d(loss)/d(output) and the output values; accumulates into the
// gradient buffers of the node's inputs.
using BackwardFn = std::function<void(std::span<const double> grad_out,
                                      std::span<const double> out)>;

// One executed primitive.
struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<ImplPtr> inputs;
  BackwardFn backward;
  bool consumed = false;
};

// Gradient buffer of `t`, allocated on first use. Empty span when `t` does
// not take part in differentiation.
std::span<double> grad_sink(const ImplPtr& t);

}  // namespace detail

// Dense row-major array of doubles with an optional gradient slot.
//
// Tensor is a cheap handle: copies share storage. Values are treated as
// immutable once a tensor has been used as an input to a primitive.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t d) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  // Writable view; only valid on leaves (no producer node).
  std::span<double> mutable_values();
  double operator[](std::size_t i) const { return values()[i]; }
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  void clear_grad();

  // Fresh leaf holding a copy of the values, cut from any graph.
  Tensor detach() const;

  const detail::ImplPtr& impl() const { return impl_; }
  static Tensor from_impl(detail::ImplPtr impl);

 private:
  detail::ImplPtr impl_;
};

// Ordered record of the primitives reachable from a root tensor. Entries are
// sorted so that every node appears after all nodes producing its inputs.
class Graph {
 public:
  struct Entry {
    detail::Node* node;
    detail::ImplPtr output;
  };

  static Graph collect(const Tensor& root);

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<Entry> entries_;
};

// Reverse-mode sweep from a scalar loss. Populates grad() on every leaf that
// requires grad, then releases the graph; a second call on the same loss
// throws GraphError.
void backward(const Tensor& loss);

bool grad_enabled();

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

// Wraps a primitive's output. Verifies finiteness and, when any input
// requires grad and recording is on, attaches a node running `fn`.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn fn);

bool any_requires_grad(const std::vector<Tensor>& inputs);

}  // namespace detail

}  // namespace crft
