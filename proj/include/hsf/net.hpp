#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hsf/config.hpp"
#include "hsf/cube.hpp"
#include "hsf/layers.hpp"
#include "hsf/observation.hpp"

namespace hsf {

/// Architecture hyperparameters of the unfolding network.
struct FusionConfig {
  int stages = 3;  // K
  Index scale = 8;  // d, a power of two
  Index hsi_bands = 31;  // S
  Index msi_bands = 3;   // s
  Index prior_dim = 32;
  int n_stl = 2;
  Index window = 8;
  Index heads = 4;
  double mlp_ratio = 2.0;
  int n_conv3d = 2;
  Index conv3d_channels = 4;  // hidden width of the 3D conv stack
  Index conv3d_kernel = 3;
  bool dense_connections = true;
  bool share_stage_params = true;
  bool per_stage_eta = false;  // one eta per stage even when the rest is shared
  Precision precision = Precision::single;
  std::uint64_t seed = 0;

  void validate() const;
  int levels() const;  // log2(scale)

  /// Keys read by from_config / written by to_config.
  static const std::set<std::string>& keys();
  static FusionConfig from_config(const KeyValueConfig& kv);
  void write_to(KeyValueConfig& kv) const;
};

template <typename T>
struct PriorModuleParams {
  Conv2dParams<T> embed;
  std::vector<SwinLayerParams<T>> stls;
  std::vector<Conv3dParams<T>> conv3d;
  Conv2dParams<T> head;
};

template <typename T>
struct StageParams {
  Conv2dParams<T> r_conv;
  Conv2dParams<T> rT_conv;
  std::vector<Conv2dParams<T>> c_convs;
  std::vector<ConvTranspose2dParams<T>> cT_convs;  // cT_convs[i] undoes c_convs[i]
  DiffTensor<T> eta_raw;  // eta = softplus(eta_raw)
  PriorModuleParams<T> prior;
};

/// Cube <-> [bands, H, W] tensor; the memory layouts coincide.
template <typename T>
DiffTensor<T> to_tensor(const HsiCube& c);
template <typename T>
HsiCube to_cube(const DiffTensor<T>& t);

/// eta-weighted gradient of the two fidelity terms, realized with the
/// stage's learned operators. x: [S, H, W], y: [s, H, W], z: [S, H/d, W/d].
template <typename T>
DiffTensor<T> data_module(const DiffTensor<T>& x, const DiffTensor<T>& y, const DiffTensor<T>& z,
                          const StageParams<T>& p);

/// Returns {v + head(features), features}. `dense` is either undefined or a
/// [channels, H, W] map matching the embed input width.
template <typename T>
std::pair<DiffTensor<T>, DiffTensor<T>> prior_module(const DiffTensor<T>& v,
                                                     const DiffTensor<T>& dense,
                                                     const PriorModuleParams<T>& p);

template <typename T>
class FusionNet {
 public:
  explicit FusionNet(const FusionConfig& cfg);

  const FusionConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  StageParams<T>& stage(int k) { return stages_.at(static_cast<std::size_t>(k)); }
  const StageParams<T>& stage(int k) const { return stages_.at(static_cast<std::size_t>(k)); }

  /// X(K) from the HR-MSI y [s, H, W] and LR-HSI z [S, H/d, W/d].
  DiffTensor<T> forward(const DiffTensor<T>& y, const DiffTensor<T>& z) const;

  /// Every stage's output X(1), ..., X(K).
  std::vector<DiffTensor<T>> forward_stages(const DiffTensor<T>& y, const DiffTensor<T>& z) const;

  Index count_params() const { return params_.scalar_count(); }

 private:
  StageParams<T> build_stage(const std::string& prefix, int k, Rng& rng);

  FusionConfig cfg_;
  ParamSet<T> params_;
  std::vector<StageParams<T>> stages_;
};

/// Learnable scalar count of a freshly built network.
Index count_params(const FusionConfig& cfg);

/// Sets eta_raw so that softplus(eta_raw) == eta. eta == 0 maps to the most
/// negative representable value, where softplus underflows to exactly 0.
template <typename T>
void set_eta(StageParams<T>& p, double eta);

template <typename T>
double eta_value(const StageParams<T>& p);

/// Overwrites the stage's data-module operators with an explicit spectral
/// response (r_conv centre tap = R, rT_conv centre tap = R^T) and a 2x2
/// per-level blur kernel applied band-wise (cT_convs tied to c_convs). Biases
/// are zeroed.
template <typename T>
void load_explicit_operators(StageParams<T>& p, const DenseMatrix<double>& response,
                             const std::vector<DenseMatrix<double>>& level_kernels);

/// Zeroes the prior head so the prior module becomes the identity.
template <typename T>
void zero_prior_head(StageParams<T>& p);

}  // namespace hsf
