#pragma once

#include <cstdint>
#include <vector>

#include "hsf/tensor.hpp"

namespace hsf {

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments live here, parameters are updated in
/// place through their handles; gradients are left untouched.
template <typename T>
class Adam {
 public:
  Adam(std::vector<DiffTensor<T>> params, AdamOptions opts);

  void step();

  std::int64_t steps_taken() const { return t_; }
  const AdamOptions& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }

  // Exposed for checkpointing.
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  void set_steps_taken(std::int64_t t) { t_ = t; }

 private:
  std::vector<DiffTensor<T>> params_;
  AdamOptions opts_;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
  std::int64_t t_ = 0;
};

}  // namespace hsf
