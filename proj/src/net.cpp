#include "hsf/net.hpp"

#include <cmath>
#include <limits>

namespace hsf {

void FusionConfig::validate() const {
  if (stages < 1) throw ConfigError("stages must be >= 1");
  if (scale < 1 || (scale & (scale - 1)) != 0) throw ConfigError("scale must be a power of two");
  if (hsi_bands < 1 || msi_bands < 1) throw ConfigError("band counts must be positive");
  if (prior_dim < 1) throw ConfigError("prior_dim must be positive");
  if (heads < 1 || prior_dim % heads != 0) throw ConfigError("prior_dim must be divisible by heads");
  if (window < 1) throw ConfigError("window must be positive");
  if (n_stl < 0 || n_conv3d < 0) throw ConfigError("layer counts must be non-negative");
  if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
  if (conv3d_channels < 1) throw ConfigError("conv3d_channels must be positive");
  if (conv3d_kernel < 1 || conv3d_kernel % 2 == 0) throw ConfigError("conv3d_kernel must be odd");
}

int FusionConfig::levels() const {
  int n = 0;
  for (Index d = scale; d > 1; d >>= 1) ++n;
  return n;
}

const std::set<std::string>& FusionConfig::keys() {
  static const std::set<std::string> k = {
      "stages",   "scale",     "hsi_bands", "msi_bands", "prior_dim",
      "n_stl",    "window",    "heads",     "mlp_ratio", "n_conv3d",
      "conv3d_channels", "conv3d_kernel", "dense_connections", "share_stage_params",
      "per_stage_eta", "precision", "seed"};
  return k;
}

FusionConfig FusionConfig::from_config(const KeyValueConfig& kv) {
  FusionConfig c;
  c.stages = static_cast<int>(kv.get_int("stages", c.stages));
  c.scale = kv.get_int("scale", c.scale);
  c.hsi_bands = kv.get_int("hsi_bands", c.hsi_bands);
  c.msi_bands = kv.get_int("msi_bands", c.msi_bands);
  c.prior_dim = kv.get_int("prior_dim", c.prior_dim);
  c.n_stl = static_cast<int>(kv.get_int("n_stl", c.n_stl));
  c.window = kv.get_int("window", c.window);
  c.heads = kv.get_int("heads", c.heads);
  c.mlp_ratio = kv.get_double("mlp_ratio", c.mlp_ratio);
  c.n_conv3d = static_cast<int>(kv.get_int("n_conv3d", c.n_conv3d));
  c.conv3d_channels = kv.get_int("conv3d_channels", c.conv3d_channels);
  c.conv3d_kernel = kv.get_int("conv3d_kernel", c.conv3d_kernel);
  c.dense_connections = kv.get_bool("dense_connections", c.dense_connections);
  c.share_stage_params = kv.get_bool("share_stage_params", c.share_stage_params);
  c.per_stage_eta = kv.get_bool("per_stage_eta", c.per_stage_eta);
  c.precision = parse_precision(kv.get_or("precision", to_string(c.precision)));
  c.seed = kv.get_u64("seed", c.seed);
  c.validate();
  return c;
}

void FusionConfig::write_to(KeyValueConfig& kv) const {
  const auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  kv.set("stages", std::to_string(stages));
  kv.set("scale", std::to_string(scale));
  kv.set("hsi_bands", std::to_string(hsi_bands));
  kv.set("msi_bands", std::to_string(msi_bands));
  kv.set("prior_dim", std::to_string(prior_dim));
  kv.set("n_stl", std::to_string(n_stl));
  kv.set("window", std::to_string(window));
  kv.set("heads", std::to_string(heads));
  kv.set("mlp_ratio", format_double(mlp_ratio));
  kv.set("n_conv3d", std::to_string(n_conv3d));
  kv.set("conv3d_channels", std::to_string(conv3d_channels));
  kv.set("conv3d_kernel", std::to_string(conv3d_kernel));
  kv.set("dense_connections", b(dense_connections));
  kv.set("share_stage_params", b(share_stage_params));
  kv.set("per_stage_eta", b(per_stage_eta));
  kv.set("precision", to_string(precision));
  kv.set("seed", std::to_string(seed));
}

template <typename T>
DiffTensor<T> to_tensor(const HsiCube& c) {
  std::vector<T> v(static_cast<std::size_t>(c.size()));
  for (Index i = 0; i < c.size(); ++i) v[static_cast<std::size_t>(i)] = static_cast<T>(c.data()[i]);
  return DiffTensor<T>({c.bands(), c.height(), c.width()}, std::move(v));
}

template <typename T>
HsiCube to_cube(const DiffTensor<T>& t) {
  if (t.rank() != 3) throw ShapeError("to_cube: expected [bands, H, W], got " + to_string(t.shape()));
  HsiCube c(t.dim(2), t.dim(1), t.dim(0));
  const auto d = t.data();
  for (Index i = 0; i < c.size(); ++i) c.data()[i] = static_cast<double>(d[static_cast<std::size_t>(i)]);
  return c;
}

template <typename T>
DiffTensor<T> data_module(const DiffTensor<T>& x, const DiffTensor<T>& y, const DiffTensor<T>& z,
                          const StageParams<T>& p) {
  const DiffTensor<T> yk = sub(conv2d(x, p.r_conv), y);
  DiffTensor<T> down = x;
  for (const auto& c : p.c_convs) down = conv2d(down, c);
  DiffTensor<T> up = sub(down, z);
  for (auto it = p.cT_convs.rbegin(); it != p.cT_convs.rend(); ++it) up = conv_transpose2d(up, *it);
  return mul(softplus(p.eta_raw), add(conv2d(yk, p.rT_conv), up));
}

template <typename T>
std::pair<DiffTensor<T>, DiffTensor<T>> prior_module(const DiffTensor<T>& v,
                                                     const DiffTensor<T>& dense,
                                                     const PriorModuleParams<T>& p) {
  if (v.rank() != 3) throw ShapeError("prior_module: expected [S, H, W], got " + to_string(v.shape()));
  const Index H = v.dim(1), W = v.dim(2);
  DiffTensor<T> f = conv2d(dense.defined() ? concat<T>({v, dense}) : v, p.embed);
  const Index P = f.dim(0);
  if (!p.stls.empty()) {
    DiffTensor<T> tokens = permute(f, {1, 2, 0});
    for (const auto& stl : p.stls) tokens = swin_layer(tokens, stl);
    f = permute(tokens, {2, 0, 1});
  }
  if (!p.conv3d.empty()) {
    DiffTensor<T> vol = reshape(f, {1, P, H, W});
    for (std::size_t i = 0; i < p.conv3d.size(); ++i) {
      vol = conv3d(vol, p.conv3d[i]);
      if (i + 1 < p.conv3d.size()) vol = gelu(vol);
    }
    f = reshape(vol, {P, H, W});
  }
  return {add(v, conv2d(f, p.head)), f};
}

template <typename T>
FusionNet<T>::FusionNet(const FusionConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  if (cfg_.share_stage_params) {
    StageParams<T> shared = build_stage("stage0.", 0, rng);
    stages_.assign(static_cast<std::size_t>(cfg_.stages), shared);
    if (cfg_.per_stage_eta)
      for (int k = 1; k < cfg_.stages; ++k) {
        const double u = std::max(rng.uniform(), 1e-6);
        stages_[static_cast<std::size_t>(k)].eta_raw =
            params_.add("stage" + std::to_string(k) + ".eta_raw", {1},
                        {static_cast<T>(std::log(std::expm1(u)))});
      }
  } else {
    for (int k = 0; k < cfg_.stages; ++k)
      stages_.push_back(build_stage("stage" + std::to_string(k) + ".", k, rng));
  }
}

template <typename T>
StageParams<T> FusionNet<T>::build_stage(const std::string& prefix, int k, Rng& rng) {
  const Index S = cfg_.hsi_bands, s = cfg_.msi_bands, P = cfg_.prior_dim;
  const ConvGeometry same{1, 1, PadMode::zero};
  const ConvGeometry down{2, 0, PadMode::zero};
  StageParams<T> sp;
  sp.r_conv = make_conv2d(params_, rng, prefix + "r_conv", S, s, 3, same);
  sp.rT_conv = make_conv2d(params_, rng, prefix + "rT_conv", s, S, 3, same);
  for (int l = 0; l < cfg_.levels(); ++l)
    sp.c_convs.push_back(make_conv2d(params_, rng, prefix + "c_conv" + std::to_string(l), S, S, 2, down));
  for (int l = 0; l < cfg_.levels(); ++l)
    sp.cT_convs.push_back(
        make_conv_transpose2d(params_, rng, prefix + "cT_conv" + std::to_string(l), S, S, 2, 2));
  const double u = std::max(rng.uniform(), 1e-6);
  sp.eta_raw = params_.add(prefix + "eta_raw", {1}, {static_cast<T>(std::log(std::expm1(u)))});

  Index embed_in = S;
  if (cfg_.dense_connections) embed_in += cfg_.share_stage_params ? P : k * P;
  auto& pr = sp.prior;
  pr.embed = make_conv2d(params_, rng, prefix + "prior.embed", embed_in, P, 3, same);
  for (int i = 0; i < cfg_.n_stl; ++i)
    pr.stls.push_back(make_swin_layer(params_, rng, prefix + "prior.stl" + std::to_string(i), P,
                                      cfg_.window, cfg_.heads, cfg_.mlp_ratio,
                                      i % 2 == 0 ? 0 : cfg_.window / 2));
  for (int i = 0; i < cfg_.n_conv3d; ++i) {
    const Index in = i == 0 ? 1 : cfg_.conv3d_channels;
    const Index out = i + 1 == cfg_.n_conv3d ? 1 : cfg_.conv3d_channels;
    pr.conv3d.push_back(make_conv3d(params_, rng, prefix + "prior.conv3d" + std::to_string(i), in,
                                    out, cfg_.conv3d_kernel));
  }
  pr.head = make_conv2d(params_, rng, prefix + "prior.head", P, S, 3, same);
  return sp;
}

template <typename T>
std::vector<DiffTensor<T>> FusionNet<T>::forward_stages(const DiffTensor<T>& y,
                                                        const DiffTensor<T>& z) const {
  const Index S = cfg_.hsi_bands, s = cfg_.msi_bands, d = cfg_.scale;
  if (y.rank() != 3 || y.dim(0) != s)
    throw ShapeError("forward: MSI must be [" + std::to_string(s) + ", H, W], got " + to_string(y.shape()));
  if (z.rank() != 3 || z.dim(0) != S)
    throw ShapeError("forward: HSI must be [" + std::to_string(S) + ", h, w], got " + to_string(z.shape()));
  const Index H = y.dim(1), W = y.dim(2);
  if (z.dim(1) * d != H || z.dim(2) * d != W)
    throw ShapeError("forward: HSI grid " + to_string(z.shape()) + " times scale " + std::to_string(d) +
                     " does not match MSI grid " + to_string(y.shape()));

  DiffTensor<T> x = to_tensor<T>(bicubic_resize_to(to_cube(z), W, H));
  std::vector<DiffTensor<T>> history, outputs;
  const T inv = T(1);
  for (int k = 0; k < cfg_.stages; ++k) {
    const StageParams<T>& sp = stage(k);
    const DiffTensor<T> v = sub(x, data_module(x, y, z, sp));
    DiffTensor<T> dense;
    if (cfg_.dense_connections) {
      if (cfg_.share_stage_params) {
        if (history.empty()) {
          dense = DiffTensor<T>({cfg_.prior_dim, H, W}, T(0));
        } else {
          dense = history.front();
          for (std::size_t i = 1; i < history.size(); ++i) dense = add(dense, history[i]);
          if (history.size() > 1) dense = scale(dense, inv / static_cast<T>(history.size()));
        }
      } else if (!history.empty()) {
        dense = history.size() == 1 ? history.front() : concat(history);
      }
    }
    auto [next, feats] = prior_module(v, dense, sp.prior);
    if (!all_finite(next))
      throw NumericsError("forward: non-finite activations after stage " + std::to_string(k));
    history.push_back(feats);
    outputs.push_back(next);
    x = next;
  }
  return outputs;
}

template <typename T>
DiffTensor<T> FusionNet<T>::forward(const DiffTensor<T>& y, const DiffTensor<T>& z) const {
  return forward_stages(y, z).back();
}

Index count_params(const FusionConfig& cfg) { return FusionNet<float>(cfg).count_params(); }

template <typename T>
void set_eta(StageParams<T>& p, double eta) {
  if (eta < 0.0) throw ConfigError("set_eta: eta must be non-negative");
  p.eta_raw.data()[0] = eta == 0.0 ? std::numeric_limits<T>::lowest()
                                   : static_cast<T>(eta > 30.0 ? eta : std::log(std::expm1(eta)));
}

template <typename T>
double eta_value(const StageParams<T>& p) {
  NoGradGuard<T> guard;
  return static_cast<double>(softplus(p.eta_raw).item());
}

template <typename T>
void load_explicit_operators(StageParams<T>& p, const DenseMatrix<double>& response,
                             const std::vector<DenseMatrix<double>>& level_kernels) {
  const Index S = p.r_conv.weight.dim(1), s = p.r_conv.weight.dim(0);
  if (response.rows() != S || response.cols() != s)
    throw ShapeError("load_explicit_operators: response must be " + std::to_string(S) + "x" +
                     std::to_string(s));
  if (p.r_conv.weight.dim(2) != 3 || p.r_conv.weight.dim(3) != 3)
    throw ShapeError("load_explicit_operators: expected 3x3 spectral convolutions");
  if (level_kernels.size() != p.c_convs.size())
    throw ShapeError("load_explicit_operators: one kernel per decimation level required");
  auto zero = [](const DiffTensor<T>& t) {
    for (T& v : t.data()) v = T(0);
  };
  zero(p.r_conv.weight), zero(p.r_conv.bias), zero(p.rT_conv.weight), zero(p.rT_conv.bias);
  auto rw = p.r_conv.weight.data();
  auto rtw = p.rT_conv.weight.data();
  for (Index b = 0; b < S; ++b)
    for (Index c = 0; c < s; ++c) {
      rw[static_cast<std::size_t>(((c * S + b) * 3 + 1) * 3 + 1)] = static_cast<T>(response(b, c));
      rtw[static_cast<std::size_t>(((b * s + c) * 3 + 1) * 3 + 1)] = static_cast<T>(response(b, c));
    }
  for (std::size_t l = 0; l < level_kernels.size(); ++l) {
    const auto& k = level_kernels[l];
    if (k.rows() != 2 || k.cols() != 2) throw ShapeError("load_explicit_operators: kernels must be 2x2");
    for (const auto* w : {&p.c_convs[l].weight, &p.cT_convs[l].weight}) {
      zero(*w);
      auto wd = w->data();
      for (Index b = 0; b < S; ++b)
        for (Index i = 0; i < 2; ++i)
          for (Index j = 0; j < 2; ++j)
            wd[static_cast<std::size_t>(((b * S + b) * 2 + i) * 2 + j)] = static_cast<T>(k(i, j));
    }
    zero(p.c_convs[l].bias), zero(p.cT_convs[l].bias);
  }
}

template <typename T>
void zero_prior_head(StageParams<T>& p) {
  for (T& v : p.prior.head.weight.data()) v = T(0);
  for (T& v : p.prior.head.bias.data()) v = T(0);
}

#define HSF_INSTANTIATE_NET(T)                                                                    \
  template DiffTensor<T> to_tensor<T>(const HsiCube&);                                            \
  template HsiCube to_cube<T>(const DiffTensor<T>&);                                              \
  template DiffTensor<T> data_module<T>(const DiffTensor<T>&, const DiffTensor<T>&,               \
                                        const DiffTensor<T>&, const StageParams<T>&);             \
  template std::pair<DiffTensor<T>, DiffTensor<T>> prior_module<T>(                               \
      const DiffTensor<T>&, const DiffTensor<T>&, const PriorModuleParams<T>&);                   \
  template class FusionNet<T>;                                                                    \
  template void set_eta<T>(StageParams<T>&, double);                                              \
  template double eta_value<T>(const StageParams<T>&);                                            \
  template void load_explicit_operators<T>(StageParams<T>&, const DenseMatrix<double>&,           \
                                           const std::vector<DenseMatrix<double>>&);              \
  template void zero_prior_head<T>(StageParams<T>&);

HSF_INSTANTIATE_NET(float)
HSF_INSTANTIATE_NET(double)

}  // namespace hsf
