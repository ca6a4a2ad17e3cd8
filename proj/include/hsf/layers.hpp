#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hsf/ops.hpp"
#include "hsf/rng.hpp"

namespace hsf {

/// Ordered registry of learnable tensors. Registration order fixes both the
/// order of initialization draws and the checkpoint record order.
template <typename T>
class ParamSet {
 public:
  using Entry = std::pair<std::string, DiffTensor<T>>;

  DiffTensor<T> add(std::string name, Shape shape, std::vector<T> values);
  DiffTensor<T> uniform(std::string name, Shape shape, double bound, Rng& rng);
  DiffTensor<T> constant(std::string name, Shape shape, T value);

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<DiffTensor<T>> tensors() const;
  const DiffTensor<T>& at(const std::string& name) const;
  Index scalar_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

template <typename T>
struct Conv2dParams {
  DiffTensor<T> weight;  // [out, in, kh, kw]
  DiffTensor<T> bias;    // [out]
  ConvGeometry geom;
};

template <typename T>
struct Conv3dParams {
  DiffTensor<T> weight;  // [out, in, kd, kh, kw]
  DiffTensor<T> bias;
};

template <typename T>
struct ConvTranspose2dParams {
  DiffTensor<T> weight;  // [in, out, kh, kw]
  DiffTensor<T> bias;
  Index stride = 2;
};

template <typename T>
struct LinearParams {
  DiffTensor<T> weight;  // [in, out]
  DiffTensor<T> bias;    // [out]
};

template <typename T>
struct LayerNormParams {
  DiffTensor<T> gamma;
  DiffTensor<T> beta;
};

template <typename T>
struct WindowAttentionParams {
  Index dim = 0;
  Index window = 0;
  Index heads = 1;
  Index shift = 0;  // 0: W-MSA, window/2: SW-MSA
  LinearParams<T> qkv;
  LinearParams<T> proj;
  DiffTensor<T> rel_bias;  // [(2M-1)^2, heads]
};

template <typename T>
struct SwinLayerParams {
  LayerNormParams<T> norm1;
  WindowAttentionParams<T> attn;
  LayerNormParams<T> norm2;
  LinearParams<T> fc1;
  LinearParams<T> fc2;
};

// Factories. Weights are uniform in +-sqrt(1/fan_in), LayerNorm starts at
// (1, 0), relative position bias at zero.
template <typename T>
Conv2dParams<T> make_conv2d(ParamSet<T>& ps, Rng& rng, const std::string& name, Index in,
                            Index out, Index k, ConvGeometry geom);
template <typename T>
Conv3dParams<T> make_conv3d(ParamSet<T>& ps, Rng& rng, const std::string& name, Index in,
                            Index out, Index k);
template <typename T>
ConvTranspose2dParams<T> make_conv_transpose2d(ParamSet<T>& ps, Rng& rng, const std::string& name,
                                               Index in, Index out, Index k, Index stride);
template <typename T>
LinearParams<T> make_linear(ParamSet<T>& ps, Rng& rng, const std::string& name, Index in,
                            Index out);
template <typename T>
LayerNormParams<T> make_layer_norm(ParamSet<T>& ps, const std::string& name, Index dim);
template <typename T>
WindowAttentionParams<T> make_window_attention(ParamSet<T>& ps, Rng& rng, const std::string& name,
                                               Index dim, Index window, Index heads, Index shift);
template <typename T>
SwinLayerParams<T> make_swin_layer(ParamSet<T>& ps, Rng& rng, const std::string& name, Index dim,
                                   Index window, Index heads, double mlp_ratio, Index shift);

template <typename T>
DiffTensor<T> conv2d(const DiffTensor<T>& x, const Conv2dParams<T>& p) {
  return conv2d(x, p.weight, p.bias, p.geom);
}
template <typename T>
DiffTensor<T> conv3d(const DiffTensor<T>& x, const Conv3dParams<T>& p) {
  return conv3d(x, p.weight, p.bias);
}
template <typename T>
DiffTensor<T> conv_transpose2d(const DiffTensor<T>& x, const ConvTranspose2dParams<T>& p) {
  return conv_transpose2d(x, p.weight, p.bias, p.stride);
}
template <typename T>
DiffTensor<T> linear(const DiffTensor<T>& x, const LinearParams<T>& p) {
  return add_bias_last(matmul(x, p.weight), p.bias);
}
template <typename T>
DiffTensor<T> layer_norm(const DiffTensor<T>& x, const LayerNormParams<T>& p) {
  return layer_norm(x, p.gamma, p.beta, 1e-5);
}

// Spatial helpers on channel-last maps [H, W, C].

/// Cyclic shift with out[i][j] = x[(i - dh) mod H][(j - dw) mod W].
template <typename T>
DiffTensor<T> roll2d(const DiffTensor<T>& x, Index dh, Index dw);
/// Zero-pads bottom/right to [Hp, Wp, C].
template <typename T>
DiffTensor<T> pad_hw(const DiffTensor<T>& x, Index Hp, Index Wp);
/// Keeps the top-left [H, W, C] block.
template <typename T>
DiffTensor<T> crop_hw(const DiffTensor<T>& x, Index H, Index W);

/// [H, W, C] -> [nW, M*M, C], windows in row-major order. H, W divisible by M.
template <typename T>
DiffTensor<T> window_partition(const DiffTensor<T>& x, Index M);
/// Inverse of window_partition.
template <typename T>
DiffTensor<T> window_reverse(const DiffTensor<T>& windows, Index M, Index H, Index W);

/// Allowed-attention flags [nW, M*M, M*M] for the shifted partition of an
/// Hp x Wp map: tokens attend only within their pre-shift region.
std::vector<std::uint8_t> shifted_window_mask(Index Hp, Index Wp, Index M, Index shift);

/// Relative-position lookup: for token pair (i, j) of an M x M window, the
/// row of the (2M-1)^2 bias table.
std::vector<Index> relative_position_index(Index M);

/// Multi-head self-attention within each window. x: [nW, M*M, dim].
/// `allowed` is empty or [nW, M*M, M*M]. When `probs` is non-null it
/// receives the attention weights [nW, heads, M*M, M*M].
template <typename T>
DiffTensor<T> window_attention(const DiffTensor<T>& x, const WindowAttentionParams<T>& p,
                               std::span<const std::uint8_t> allowed = {},
                               DiffTensor<T>* probs = nullptr);

/// LN -> (S)W-MSA -> residual -> LN -> MLP(GELU) -> residual on [H, W, dim].
/// Extents not divisible by the window are zero-padded after the first LN
/// and cropped before the residual add.
template <typename T>
DiffTensor<T> swin_layer(const DiffTensor<T>& x, const SwinLayerParams<T>& p);

}  // namespace hsf
