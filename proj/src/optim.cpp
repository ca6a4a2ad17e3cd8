#include "hsf/optim.hpp"

#include <cmath>

namespace hsf {

template <typename T>
Adam<T>::Adam(std::vector<DiffTensor<T>> params, AdamOptions opts)
    : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!params_[i].has_grad())
      throw StateError("adam step: parameter " + std::to_string(i) + " has no gradient");
  ++t_;
  const T b1 = static_cast<T>(opts_.beta1);
  const T b2 = static_cast<T>(opts_.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(opts_.beta1, static_cast<double>(t_)));
  const T c2 = static_cast<T>(1.0 - std::pow(opts_.beta2, static_cast<double>(t_)));
  const T lr = static_cast<T>(opts_.lr);
  const T eps = static_cast<T>(opts_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i].data();
    const auto g = params_[i].grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] / c1;
      const T vhat = v[j] / c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

}  // namespace hsf
