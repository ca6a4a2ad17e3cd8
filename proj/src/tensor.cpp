#include "hsf/tensor.hpp"

#include <numeric>
#include <sstream>

namespace hsf {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::string to_string(Precision p) { return p == Precision::single ? "single" : "double"; }

Precision parse_precision(const std::string& s) {
  if (s == "single" || s == "float" || s == "f32") return Precision::single;
  if (s == "double" || s == "f64") return Precision::double_;
  throw ConfigError("unknown precision '" + s + "' (expected single|double)");
}

namespace {
void check_shape(const Shape& shape) {
  for (Index e : shape)
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
}
}  // namespace

template <typename T>
DiffTensor<T>::DiffTensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  node_->value.assign(static_cast<std::size_t>(hsf::numel(shape)), fill);
  node_->shape = std::move(shape);
}

template <typename T>
DiffTensor<T>::DiffTensor(Shape shape, std::vector<T> values)
    : node_(std::make_shared<TensorNode<T>>()) {
  check_shape(shape);
  if (static_cast<Index>(values.size()) != hsf::numel(shape))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     to_string(shape));
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

template <typename T>
T DiffTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

template <typename T>
Tape<T>::Tape() : previous_(active_) {
  active_ = this;
}

template <typename T>
Tape<T>::~Tape() {
  if (active_ == this) active_ = previous_;
}

template <typename T>
void Tape<T>::record(std::function<void()> backward_fn) {
  if (consumed_) throw StateError("cannot record on a consumed tape");
  ops_.push_back(std::move(backward_fn));
  ++recorded_;
}

template <typename T>
void Tape<T>::backward(const DiffTensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward requires a scalar loss, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  if (consumed_) throw StateError("backward called twice on the same tape");
  if (!loss.requires_grad()) throw StateError("loss does not depend on any differentiable input");
  consumed_ = true;
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
  ops_.shrink_to_fit();
}

template class DiffTensor<float>;
template class DiffTensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace hsf
