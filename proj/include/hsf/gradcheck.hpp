#pragma once

#include <functional>
#include <span>
#include <string>

#include "hsf/tensor.hpp"

namespace hsf {

struct GradcheckReport {
  double max_rel_error = 0.0;
  Index checked = 0;
  std::string worst;  // "param#element" of the worst entry
  double tolerance = 0.0;
  bool passed = false;
};

/// Compares reverse-mode gradients of `build_loss` against central
/// differences with step h for every element of every tensor in `params`.
/// The stencil is the fourth-order one over +-h, +-2h: the two-point
/// stencil leaves an h^2 truncation term near 1e-6 relative on
/// softmax-heavy graphs.
///
/// The relative error of an entry is |analytic - numeric| / max(|analytic|,
/// |numeric|, floor) where floor = 1e-3 * max(1, |loss|); the floor keeps
/// central-difference round-off out of the ratio: a forward pass that is
/// off by k ulps of |loss| shows up as ~1e-11 k |loss| at h = 1e-5.
/// Inputs must avoid kinks (relu/abs at 0) by more than h.
GradcheckReport gradcheck(const std::function<DiffTensor<double>()>& build_loss,
                          std::span<const DiffTensor<double>> params, double tolerance,
                          double h = 1e-5);

}  // namespace hsf
