#pragma once

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hsf/errors.hpp"

namespace hsf {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class Precision { single, double_ };

std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  /// Zero-filled gradient buffer, allocated on first use.
  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Handle to a dense row-major tensor that may take part in reverse-mode
/// differentiation. Copies share the underlying node.
template <typename T>
class DiffTensor {
 public:
  using Scalar = T;

  DiffTensor() = default;
  explicit DiffTensor(Shape shape, T fill = T(0));
  DiffTensor(Shape shape, std::vector<T> values);

  static DiffTensor scalar(T v) { return DiffTensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  Index numel() const { return static_cast<Index>(node_->value.size()); }

  std::span<T> data() const { return node_->value; }
  T item() const;
  T operator[](Index i) const { return node_->value[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_->requires_grad; }
  DiffTensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> vec() const {
    return {node_->value.data(), numel()};
  }

  /// Fresh node with copied values and no gradient history.
  DiffTensor detach() const { return DiffTensor(shape(), node_->value); }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Records differentiable ops executed while it is the active tape of its
/// thread. Construction activates it; destruction restores the previous one.
template <typename T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse order.
  /// A tape can be consumed once.
  void backward(const DiffTensor<T>& loss);

  std::size_t size() const { return recorded_; }
  bool consumed() const { return consumed_; }

 private:
  template <typename U>
  friend class NoGradGuard;

  std::vector<std::function<void()>> ops_;
  std::size_t recorded_ = 0;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
  static thread_local Tape* active_;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

/// Suspends recording for the current thread within its scope.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : saved_(Tape<T>::active_) { Tape<T>::active_ = nullptr; }
  ~NoGradGuard() { Tape<T>::active_ = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>* saved_;
};

template <typename T>
void zero_grads(std::span<const DiffTensor<T>> params) {
  for (const auto& p : params) p.node()->grad.clear();
}

/// True when every value is finite.
template <typename T>
bool all_finite(const DiffTensor<T>& x) {
  for (T v : x.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace hsf
