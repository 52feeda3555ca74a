#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dia/error.hpp"

namespace dia {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first gradient arrives
  bool requires_grad = false;
};

}  // namespace detail

// Dense row-major array of doubles with an optional gradient slot. Copies are
// shallow: two Tensor handles may refer to the same storage, which is how
// parameter sharing is expressed.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " holds " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  // Returns the gradient buffer, allocating zeros on first use. Const because
  // Tensor is a handle: gradient slots are writable through any copy.
  std::span<double> mutable_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // Storage identity; equal for handles that share parameters.
  const void* id() const { return impl_.get(); }

  // Deep copy without gradient or graph history.
  Tensor detach() const { return Tensor(shape(), impl_->data, false); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Define-by-run tape. Ops append a node whenever an input requires a
// gradient; `backward` replays the nodes in exact reverse recording order and
// then clears the tape. One graph per thread.
class Graph {
 public:
  struct Node {
    std::string_view opcode;
    Tensor output;
    std::function<void(std::span<const double> grad_out)> backward;
  };

  static Graph& current() {
    thread_local Graph graph;
    return graph;
  }

  bool recording() const { return enabled_; }
  bool empty() const { return nodes_.empty(); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  void record(std::string_view opcode, Tensor output,
              std::function<void(std::span<const double>)> backward) {
    nodes_.push_back(Node{opcode, std::move(output), std::move(backward)});
  }

  void backward(Tensor loss) {
    if (loss.numel() != 1) {
      throw GraphError("backward: loss must be scalar, got shape " +
                       shape_str(loss.shape()));
    }
    if (nodes_.empty()) {
      throw GraphError(
          "backward: graph is empty (already consumed by a previous backward "
          "or nothing was recorded)");
    }
    if (!loss.requires_grad()) {
      throw GraphError("backward: loss does not depend on any tensor requiring grad");
    }
    loss.mutable_grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward(it->output.grad());
    }
    nodes_.clear();
  }

 private:
  friend class NoGradGuard;
  std::vector<Node> nodes_;
  bool enabled_ = true;
};

// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Graph::current().enabled_) { Graph::current().enabled_ = false; }
  ~NoGradGuard() { Graph::current().enabled_ = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline void backward(Tensor loss) { Graph::current().backward(std::move(loss)); }

}  // namespace dia
