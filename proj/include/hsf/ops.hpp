#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hsf/tensor.hpp"

namespace hsf {

// Differentiable primitives. Every op records its backward closure on the
// active Tape when at least one input requires a gradient; without an active
// tape ops are plain evaluations. Binary elementwise ops accept a one-element
// tensor on either side as a scalar; there is no other broadcasting.

template <typename T> DiffTensor<T> add(const DiffTensor<T>& a, const DiffTensor<T>& b);
template <typename T> DiffTensor<T> sub(const DiffTensor<T>& a, const DiffTensor<T>& b);
template <typename T> DiffTensor<T> mul(const DiffTensor<T>& a, const DiffTensor<T>& b);
template <typename T> DiffTensor<T> scale(const DiffTensor<T>& a, T s);
template <typename T> DiffTensor<T> relu(const DiffTensor<T>& a);
/// Exact (erf) GELU.
template <typename T> DiffTensor<T> gelu(const DiffTensor<T>& a);
template <typename T> DiffTensor<T> softplus(const DiffTensor<T>& a);

/// [m,k] x [k,n] -> [m,n]
template <typename T> DiffTensor<T> matmul(const DiffTensor<T>& a, const DiffTensor<T>& b);
/// Batched: [B,m,k] x [B,k,n] -> [B,m,n]
template <typename T> DiffTensor<T> bmm(const DiffTensor<T>& a, const DiffTensor<T>& b);

template <typename T> DiffTensor<T> reshape(const DiffTensor<T>& x, Shape shape);
template <typename T> DiffTensor<T> permute(const DiffTensor<T>& x, const std::vector<int>& axes);
/// out[i] = x[index[i]], or 0 where index[i] < 0. Backward scatter-adds.
template <typename T>
DiffTensor<T> gather(const DiffTensor<T>& x, Shape out_shape, std::span<const Index> index);
/// Concatenation along axis 0.
template <typename T> DiffTensor<T> concat(const std::vector<DiffTensor<T>>& parts);

template <typename T> DiffTensor<T> sum(const DiffTensor<T>& x);
template <typename T> DiffTensor<T> mean(const DiffTensor<T>& x);
/// Mean absolute value; subgradient sign(0) = 0.
template <typename T> DiffTensor<T> l1(const DiffTensor<T>& x);

/// x: [rows, n] (any leading shape), bias: [n].
template <typename T> DiffTensor<T> add_bias_last(const DiffTensor<T>& x, const DiffTensor<T>& bias);

/// Softmax over the last axis. `allowed` (same element count as x, may be
/// empty) marks entries that take part; the rest get probability exactly 0.
/// Every row needs at least one allowed entry.
template <typename T>
DiffTensor<T> softmax(const DiffTensor<T>& x, std::span<const std::uint8_t> allowed = {});

/// Normalization over the last axis followed by the affine map gamma*x+beta.
template <typename T>
DiffTensor<T> layer_norm(const DiffTensor<T>& x, const DiffTensor<T>& gamma,
                         const DiffTensor<T>& beta, double eps = 1e-5);

enum class PadMode { zero, circular };

struct ConvGeometry {
  Index stride = 1;
  Index pad = 0;
  PadMode mode = PadMode::zero;
};

/// Cross-correlation. x: [C_in,H,W], w: [C_out,C_in,kh,kw], b: [C_out] or undefined.
template <typename T>
DiffTensor<T> conv2d(const DiffTensor<T>& x, const DiffTensor<T>& w, const DiffTensor<T>& b,
                     ConvGeometry geom);

/// Stride-1 same-padded (zero) 3D cross-correlation.
/// x: [C_in,D,H,W], w: [C_out,C_in,kd,kh,kw] with odd extents.
template <typename T>
DiffTensor<T> conv3d(const DiffTensor<T>& x, const DiffTensor<T>& w, const DiffTensor<T>& b);

/// Adjoint of the unpadded conv2d with the same weight tensor.
/// x: [C_in,h,w], w: [C_in,C_out,kh,kw] -> [C_out,(h-1)*s+kh,(w-1)*s+kw].
template <typename T>
DiffTensor<T> conv_transpose2d(const DiffTensor<T>& x, const DiffTensor<T>& w,
                               const DiffTensor<T>& b, Index stride);

namespace testing {
/// Fault-injection hook for the self-test: when set, conv2d's weight
/// gradient is perturbed by a relative 1e-3.
void set_conv2d_backward_fault(bool on);
bool conv2d_backward_fault();
}  // namespace testing

}  // namespace hsf
