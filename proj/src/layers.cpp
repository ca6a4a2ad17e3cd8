#include "hsf/layers.hpp"

#include <cmath>
#include <numeric>

namespace hsf {

template <typename T>
DiffTensor<T> ParamSet<T>::add(std::string name, Shape shape, std::vector<T> values) {
  for (const auto& [n, _] : entries_)
    if (n == name) throw ConfigError("duplicate parameter name '" + name + "'");
  DiffTensor<T> t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  entries_.emplace_back(std::move(name), t);
  return t;
}

template <typename T>
DiffTensor<T> ParamSet<T>::uniform(std::string name, Shape shape, double bound, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return add(std::move(name), std::move(shape), std::move(v));
}

template <typename T>
DiffTensor<T> ParamSet<T>::constant(std::string name, Shape shape, T value) {
  std::vector<T> v(static_cast<std::size_t>(numel(shape)), value);
  return add(std::move(name), std::move(shape), std::move(v));
}

template <typename T>
std::vector<DiffTensor<T>> ParamSet<T>::tensors() const {
  std::vector<DiffTensor<T>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

template <typename T>
const DiffTensor<T>& ParamSet<T>::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw ConfigError("no parameter named '" + name + "'");
}

template <typename T>
Index ParamSet<T>::scalar_count() const {
  Index n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
Conv2dParams<T> make_conv2d(ParamSet<T>& ps, Rng& rng, const std::string& name, Index in,
                            Index out, Index k, ConvGeometry geom) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in * k * k));
  Conv2dParams<T> p;
  p.weight = ps.uniform(name + ".weight", {out, in, k, k}, bound, rng);
  p.bias = ps.uniform(name + ".bias", {out}, bound, rng);
  p.geom = geom;
  return p;
}

template <typename T>
Conv3dParams<T> make_conv3d(ParamSet<T>& ps, Rng& rng, const std::string& name, Index in,
                            Index out, Index k) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in * k * k * k));
  Conv3dParams<T> p;
  p.weight = ps.uniform(name + ".weight", {out, in, k, k, k}, bound, rng);
  p.bias = ps.uniform(name + ".bias", {out}, bound, rng);
  return p;
}

template <typename T>
ConvTranspose2dParams<T> make_conv_transpose2d(ParamSet<T>& ps, Rng& rng, const std::string& name,
                                               Index in, Index out, Index k, Index stride) {
  // Each output pixel of a stride-k, kernel-k transposed conv sees `in` taps.
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  ConvTranspose2dParams<T> p;
  p.weight = ps.uniform(name + ".weight", {in, out, k, k}, bound, rng);
  p.bias = ps.uniform(name + ".bias", {out}, bound, rng);
  p.stride = stride;
  return p;
}

template <typename T>
LinearParams<T> make_linear(ParamSet<T>& ps, Rng& rng, const std::string& name, Index in,
                            Index out) {
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  LinearParams<T> p;
  p.weight = ps.uniform(name + ".weight", {in, out}, bound, rng);
  p.bias = ps.uniform(name + ".bias", {out}, bound, rng);
  return p;
}

template <typename T>
LayerNormParams<T> make_layer_norm(ParamSet<T>& ps, const std::string& name, Index dim) {
  return {ps.constant(name + ".gamma", {dim}, T(1)), ps.constant(name + ".beta", {dim}, T(0))};
}

template <typename T>
WindowAttentionParams<T> make_window_attention(ParamSet<T>& ps, Rng& rng, const std::string& name,
                                               Index dim, Index window, Index heads, Index shift) {
  if (heads < 1 || dim % heads != 0)
    throw ConfigError("attention dim " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  if (window < 1 || shift < 0 || shift >= window)
    throw ConfigError("invalid window/shift for attention");
  WindowAttentionParams<T> p;
  p.dim = dim;
  p.window = window;
  p.heads = heads;
  p.shift = shift;
  p.qkv = make_linear(ps, rng, name + ".qkv", dim, 3 * dim);
  p.proj = make_linear(ps, rng, name + ".proj", dim, dim);
  p.rel_bias = ps.constant(name + ".rel_bias", {(2 * window - 1) * (2 * window - 1), heads}, T(0));
  return p;
}

template <typename T>
SwinLayerParams<T> make_swin_layer(ParamSet<T>& ps, Rng& rng, const std::string& name, Index dim,
                                   Index window, Index heads, double mlp_ratio, Index shift) {
  const Index hidden = std::max<Index>(1, static_cast<Index>(std::lround(mlp_ratio * dim)));
  SwinLayerParams<T> p;
  p.norm1 = make_layer_norm(ps, name + ".norm1", dim);
  p.attn = make_window_attention(ps, rng, name + ".attn", dim, window, heads, shift);
  p.norm2 = make_layer_norm(ps, name + ".norm2", dim);
  p.fc1 = make_linear(ps, rng, name + ".fc1", dim, hidden);
  p.fc2 = make_linear(ps, rng, name + ".fc2", hidden, dim);
  return p;
}

namespace {

template <typename T>
void require_hwc(const DiffTensor<T>& x, const char* what) {
  if (x.rank() != 3) throw ShapeError(std::string(what) + " expects [H,W,C], got " + to_string(x.shape()));
}

Index wrap(Index i, Index n) { return ((i % n) + n) % n; }

}  // namespace

template <typename T>
DiffTensor<T> roll2d(const DiffTensor<T>& x, Index dh, Index dw) {
  require_hwc(x, "roll2d");
  const Index H = x.dim(0), W = x.dim(1), C = x.dim(2);
  std::vector<Index> idx(static_cast<std::size_t>(x.numel()));
  Index o = 0;
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j) {
      const Index base = (wrap(i - dh, H) * W + wrap(j - dw, W)) * C;
      for (Index c = 0; c < C; ++c) idx[o++] = base + c;
    }
  return gather(x, x.shape(), std::span<const Index>(idx));
}

template <typename T>
DiffTensor<T> pad_hw(const DiffTensor<T>& x, Index Hp, Index Wp) {
  require_hwc(x, "pad_hw");
  const Index H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (Hp < H || Wp < W) throw ShapeError("pad_hw: target smaller than input");
  if (Hp == H && Wp == W) return x;
  std::vector<Index> idx(static_cast<std::size_t>(Hp * Wp * C), -1);
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j)
      for (Index c = 0; c < C; ++c) idx[(i * Wp + j) * C + c] = (i * W + j) * C + c;
  return gather(x, Shape{Hp, Wp, C}, std::span<const Index>(idx));
}

template <typename T>
DiffTensor<T> crop_hw(const DiffTensor<T>& x, Index H, Index W) {
  require_hwc(x, "crop_hw");
  const Index Hp = x.dim(0), Wp = x.dim(1), C = x.dim(2);
  if (H > Hp || W > Wp) throw ShapeError("crop_hw: target larger than input");
  if (Hp == H && Wp == W) return x;
  std::vector<Index> idx(static_cast<std::size_t>(H * W * C));
  for (Index i = 0; i < H; ++i)
    for (Index j = 0; j < W; ++j)
      for (Index c = 0; c < C; ++c) idx[(i * W + j) * C + c] = (i * Wp + j) * C + c;
  return gather(x, Shape{H, W, C}, std::span<const Index>(idx));
}

namespace {

// Flat [H,W,C] index of token t of window w, channel c.
std::vector<Index> partition_index(Index H, Index W, Index C, Index M) {
  const Index nWw = W / M;
  const Index nW = (H / M) * nWw;
  std::vector<Index> idx(static_cast<std::size_t>(H * W * C));
  Index o = 0;
  for (Index w = 0; w < nW; ++w) {
    const Index r0 = (w / nWw) * M, c0 = (w % nWw) * M;
    for (Index t = 0; t < M * M; ++t) {
      const Index base = ((r0 + t / M) * W + c0 + t % M) * C;
      for (Index c = 0; c < C; ++c) idx[o++] = base + c;
    }
  }
  return idx;
}

}  // namespace

template <typename T>
DiffTensor<T> window_partition(const DiffTensor<T>& x, Index M) {
  require_hwc(x, "window_partition");
  const Index H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (M < 1 || H % M != 0 || W % M != 0)
    throw ShapeError("window_partition: " + to_string(x.shape()) + " not divisible by window " +
                     std::to_string(M));
  const auto idx = partition_index(H, W, C, M);
  return gather(x, Shape{(H / M) * (W / M), M * M, C}, std::span<const Index>(idx));
}

template <typename T>
DiffTensor<T> window_reverse(const DiffTensor<T>& windows, Index M, Index H, Index W) {
  if (windows.rank() != 3 || M < 1 || H % M != 0 || W % M != 0 ||
      windows.dim(0) != (H / M) * (W / M) || windows.dim(1) != M * M)
    throw ShapeError("window_reverse: " + to_string(windows.shape()) +
                     " incompatible with map " + std::to_string(H) + "x" + std::to_string(W));
  const Index C = windows.dim(2);
  const auto fwd = partition_index(H, W, C, M);
  std::vector<Index> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = static_cast<Index>(i);
  return gather(windows, Shape{H, W, C}, std::span<const Index>(inv));
}

std::vector<std::uint8_t> shifted_window_mask(Index Hp, Index Wp, Index M, Index shift) {
  if (Hp % M != 0 || Wp % M != 0) throw ShapeError("shifted_window_mask: extents not divisible");
  auto region = [M, shift](Index i, Index n) -> int {
    if (i < n - M) return 0;
    if (i < n - shift) return 1;
    return 2;
  };
  std::vector<int> label(static_cast<std::size_t>(Hp * Wp));
  for (Index i = 0; i < Hp; ++i)
    for (Index j = 0; j < Wp; ++j) label[i * Wp + j] = 3 * region(i, Hp) + region(j, Wp);
  const Index nWw = Wp / M;
  const Index nW = (Hp / M) * nWw;
  const Index N = M * M;
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(nW * N * N));
  for (Index w = 0; w < nW; ++w) {
    const Index r0 = (w / nWw) * M, c0 = (w % nWw) * M;
    for (Index a = 0; a < N; ++a)
      for (Index b = 0; b < N; ++b) {
        const int la = label[(r0 + a / M) * Wp + c0 + a % M];
        const int lb = label[(r0 + b / M) * Wp + c0 + b % M];
        allowed[(w * N + a) * N + b] = la == lb ? 1 : 0;
      }
  }
  return allowed;
}

std::vector<Index> relative_position_index(Index M) {
  const Index N = M * M;
  std::vector<Index> idx(static_cast<std::size_t>(N * N));
  for (Index a = 0; a < N; ++a)
    for (Index b = 0; b < N; ++b) {
      const Index dh = a / M - b / M + M - 1;
      const Index dw = a % M - b % M + M - 1;
      idx[a * N + b] = dh * (2 * M - 1) + dw;
    }
  return idx;
}

template <typename T>
DiffTensor<T> window_attention(const DiffTensor<T>& x, const WindowAttentionParams<T>& p,
                               std::span<const std::uint8_t> allowed, DiffTensor<T>* probs) {
  const Index C = p.dim, nH = p.heads, M = p.window, N = M * M;
  if (nH < 1 || C % nH != 0)
    throw ConfigError("attention dim " + std::to_string(C) + " not divisible by " +
                      std::to_string(nH) + " heads");
  if (x.rank() != 3 || x.dim(1) != N || x.dim(2) != C)
    throw ShapeError("window_attention expects [nW," + std::to_string(N) + "," +
                     std::to_string(C) + "], got " + to_string(x.shape()));
  const Index nW = x.dim(0), hd = C / nH;

  auto qkv = linear(reshape(x, {nW * N, C}), p.qkv);
  auto heads = permute(reshape(qkv, {nW, N, 3, nH, hd}), {2, 0, 3, 1, 4});  // [3,nW,nH,N,hd]
  const Index block = nW * nH * N * hd;
  auto slice = [&](Index k) {
    std::vector<Index> idx(static_cast<std::size_t>(block));
    std::iota(idx.begin(), idx.end(), k * block);
    return gather(heads, Shape{nW * nH, N, hd}, std::span<const Index>(idx));
  };
  auto q = scale(slice(0), static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  auto k = slice(1);
  auto v = slice(2);

  auto scores = reshape(bmm(q, permute(k, {0, 2, 1})), {nW, nH, N, N});

  const auto rel = relative_position_index(M);
  std::vector<Index> bidx(static_cast<std::size_t>(nW * nH * N * N));
  for (Index w = 0, o = 0; w < nW; ++w)
    for (Index h = 0; h < nH; ++h)
      for (Index ij = 0; ij < N * N; ++ij) bidx[o++] = rel[ij] * nH + h;
  scores = add(scores, gather(p.rel_bias, Shape{nW, nH, N, N}, std::span<const Index>(bidx)));

  std::vector<std::uint8_t> mask4;
  if (!allowed.empty()) {
    if (static_cast<Index>(allowed.size()) != nW * N * N)
      throw ShapeError("window_attention: mask must be [nW, N, N]");
    mask4.resize(static_cast<std::size_t>(nW * nH * N * N));
    for (Index w = 0, o = 0; w < nW; ++w)
      for (Index h = 0; h < nH; ++h)
        for (Index ij = 0; ij < N * N; ++ij) mask4[o++] = allowed[w * N * N + ij];
  }
  auto attn = softmax(scores, std::span<const std::uint8_t>(mask4));
  if (probs) *probs = attn;

  auto out = bmm(reshape(attn, {nW * nH, N, N}), v);                        // [nW*nH,N,hd]
  out = reshape(permute(reshape(out, {nW, nH, N, hd}), {0, 2, 1, 3}), {nW * N, C});
  return reshape(linear(out, p.proj), {nW, N, C});
}

template <typename T>
DiffTensor<T> swin_layer(const DiffTensor<T>& x, const SwinLayerParams<T>& p) {
  require_hwc(x, "swin_layer");
  const Index H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const Index M = p.attn.window, s = p.attn.shift;
  const Index Hp = (H + M - 1) / M * M, Wp = (W + M - 1) / M * M;

  auto h = pad_hw(layer_norm(x, p.norm1), Hp, Wp);
  if (s > 0) h = roll2d(h, -s, -s);
  std::vector<std::uint8_t> mask;
  if (s > 0) mask = shifted_window_mask(Hp, Wp, M, s);
  h = window_attention(window_partition(h, M), p.attn, std::span<const std::uint8_t>(mask));
  h = window_reverse(h, M, Hp, Wp);
  if (s > 0) h = roll2d(h, s, s);
  auto y = add(x, crop_hw(h, H, W));

  auto flat = reshape(layer_norm(y, p.norm2), {H * W, C});
  auto mlp = linear(gelu(linear(flat, p.fc1)), p.fc2);
  return add(y, reshape(mlp, {H, W, C}));
}

#define HSF_INSTANTIATE_LAYERS(T)                                                                \
  template class ParamSet<T>;                                                                    \
  template Conv2dParams<T> make_conv2d(ParamSet<T>&, Rng&, const std::string&, Index, Index,     \
                                       Index, ConvGeometry);                                     \
  template Conv3dParams<T> make_conv3d(ParamSet<T>&, Rng&, const std::string&, Index, Index,     \
                                       Index);                                                   \
  template ConvTranspose2dParams<T> make_conv_transpose2d(ParamSet<T>&, Rng&, const std::string&, \
                                                          Index, Index, Index, Index);           \
  template LinearParams<T> make_linear(ParamSet<T>&, Rng&, const std::string&, Index, Index);    \
  template LayerNormParams<T> make_layer_norm(ParamSet<T>&, const std::string&, Index);          \
  template WindowAttentionParams<T> make_window_attention(ParamSet<T>&, Rng&, const std::string&, \
                                                          Index, Index, Index, Index);           \
  template SwinLayerParams<T> make_swin_layer(ParamSet<T>&, Rng&, const std::string&, Index,     \
                                              Index, Index, double, Index);                      \
  template DiffTensor<T> roll2d(const DiffTensor<T>&, Index, Index);                             \
  template DiffTensor<T> pad_hw(const DiffTensor<T>&, Index, Index);                             \
  template DiffTensor<T> crop_hw(const DiffTensor<T>&, Index, Index);                            \
  template DiffTensor<T> window_partition(const DiffTensor<T>&, Index);                          \
  template DiffTensor<T> window_reverse(const DiffTensor<T>&, Index, Index, Index);              \
  template DiffTensor<T> window_attention(const DiffTensor<T>&, const WindowAttentionParams<T>&, \
                                          std::span<const std::uint8_t>, DiffTensor<T>*);        \
  template DiffTensor<T> swin_layer(const DiffTensor<T>&, const SwinLayerParams<T>&);

HSF_INSTANTIATE_LAYERS(float)
HSF_INSTANTIATE_LAYERS(double)

}  // namespace hsf
