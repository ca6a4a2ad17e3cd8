#include "hsf/ops.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>

namespace hsf {

namespace testing {
namespace {
std::atomic<bool> g_conv2d_fault{false};
}
void set_conv2d_backward_fault(bool on) { g_conv2d_fault = on; }
bool conv2d_backward_fault() { return g_conv2d_fault; }
}  // namespace testing

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<RowMat<T>>;
template <typename T>
using MapCRM = Eigen::Map<const RowMat<T>>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
bool tracking(std::initializer_list<const DiffTensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const auto* x : inputs)
    if (x && x->defined() && x->requires_grad()) return true;
  return false;
}

template <typename T, typename F>
void record(const DiffTensor<T>& out, F&& fn) {
  out.node()->requires_grad = true;
  Tape<T>::active()->record(std::forward<F>(fn));
}

template <typename T, typename F, typename DA, typename DB>
DiffTensor<T> binary_op(const char* name, const DiffTensor<T>& a, const DiffTensor<T>& b, F f,
                        DA da, DB db) {
  const Index na = a.numel(), nb = b.numel();
  Shape shape;
  if (a.shape() == b.shape() || nb == 1)
    shape = a.shape();
  else if (na == 1)
    shape = b.shape();
  else
    throw ShapeError(std::string(name) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  const Index n = numel(shape);
  const Index sa = na == 1 ? 0 : 1;
  const Index sb = nb == 1 ? 0 : 1;
  std::vector<T> out(static_cast<std::size_t>(n));
  const auto A = a.data();
  const auto B = b.data();
  for (Index i = 0; i < n; ++i) out[i] = f(A[i * sa], B[i * sb]);
  DiffTensor<T> res(shape, std::move(out));
  if (tracking({&a, &b})) {
    record(res, [an = a.node(), bn = b.node(), on = res.node(), n, sa, sb, da, db] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      if (an->requires_grad) {
        auto ga = an->grad_buffer();
        for (Index i = 0; i < n; ++i) ga[i * sa] += da(an->value[i * sa], bn->value[i * sb], g[i]);
      }
      if (bn->requires_grad) {
        auto gb = bn->grad_buffer();
        for (Index i = 0; i < n; ++i) gb[i * sb] += db(an->value[i * sa], bn->value[i * sb], g[i]);
      }
    });
  }
  return res;
}

template <typename T, typename F, typename D>
DiffTensor<T> unary_op(const DiffTensor<T>& a, F f, D d) {
  const Index n = a.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  const auto A = a.data();
  for (Index i = 0; i < n; ++i) out[i] = f(A[i]);
  DiffTensor<T> res(a.shape(), std::move(out));
  if (tracking({&a})) {
    record(res, [an = a.node(), on = res.node(), n, d] {
      if (on->grad.empty()) return;
      auto ga = an->grad_buffer();
      for (Index i = 0; i < n; ++i) ga[i] += d(an->value[i], on->value[i], on->grad[i]);
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> gather_impl(const DiffTensor<T>& x, Shape out_shape, std::vector<Index> index) {
  const Index n = numel(out_shape);
  if (static_cast<Index>(index.size()) != n)
    throw ShapeError("gather: index count does not match output shape " + to_string(out_shape));
  const Index limit = x.numel();
  const auto X = x.data();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const Index s = index[i];
    if (s >= limit) throw ShapeError("gather: index out of range");
    out[i] = s < 0 ? T(0) : X[s];
  }
  DiffTensor<T> res(std::move(out_shape), std::move(out));
  if (tracking({&x})) {
    record(res, [xn = x.node(), on = res.node(), idx = std::move(index)] {
      if (on->grad.empty()) return;
      auto gx = xn->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i)
        if (idx[i] >= 0) gx[idx[i]] += on->grad[i];
    });
  }
  return res;
}

// Maps (channel, kernel offset) x (output position) to a flat input index, or
// -1 for zero padding. One table serves conv2d, conv3d and the transposed conv.
struct PatchIndex {
  Index rows = 0;
  Index cols = 0;
  Index od = 0, oh = 0, ow = 0;
  std::vector<Index> src;
};

using PatchKey = std::array<Index, 14>;

const PatchIndex& patch_index(const PatchKey& key) {
  thread_local std::map<PatchKey, PatchIndex> cache;
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  const auto [c, d, h, w, kd, kh, kw, sd, sh, sw, pd, ph, pw, circ] = key;
  PatchIndex p;
  p.od = (d + 2 * pd - kd) / sd + 1;
  p.oh = (h + 2 * ph - kh) / sh + 1;
  p.ow = (w + 2 * pw - kw) / sw + 1;
  if (d + 2 * pd < kd || h + 2 * ph < kh || w + 2 * pw < kw)
    throw ShapeError("convolution kernel larger than padded input");
  p.rows = c * kd * kh * kw;
  p.cols = p.od * p.oh * p.ow;
  p.src.resize(static_cast<std::size_t>(p.rows * p.cols));
  auto wrap = [circ](Index i, Index n) -> Index {
    if (circ) return ((i % n) + n) % n;
    return (i < 0 || i >= n) ? -1 : i;
  };
  Index r = 0;
  for (Index ch = 0; ch < c; ++ch)
    for (Index a = 0; a < kd; ++a)
      for (Index b = 0; b < kh; ++b)
        for (Index e = 0; e < kw; ++e, ++r) {
          Index col = 0;
          for (Index z = 0; z < p.od; ++z) {
            const Index iz = wrap(z * sd + a - pd, d);
            for (Index y = 0; y < p.oh; ++y) {
              const Index iy = wrap(y * sh + b - ph, h);
              for (Index x = 0; x < p.ow; ++x, ++col) {
                const Index ix = wrap(x * sw + e - pw, w);
                p.src[r * p.cols + col] =
                    (iz < 0 || iy < 0 || ix < 0) ? -1 : ((ch * d + iz) * h + iy) * w + ix;
              }
            }
          }
        }
  return cache.emplace(key, std::move(p)).first->second;
}

template <typename T>
RowMat<T> im2col(const PatchIndex& p, std::span<const T> x) {
  RowMat<T> cols(p.rows, p.cols);
  T* dst = cols.data();
  const Index n = p.rows * p.cols;
  for (Index i = 0; i < n; ++i) {
    const Index s = p.src[i];
    dst[i] = s < 0 ? T(0) : x[s];
  }
  return cols;
}

template <typename T>
void col2im_add(const PatchIndex& p, const T* cols, std::span<T> x) {
  const Index n = p.rows * p.cols;
  for (Index i = 0; i < n; ++i) {
    const Index s = p.src[i];
    if (s >= 0) x[s] += cols[i];
  }
}

// Shared forward/backward for conv2d and conv3d. The weight is viewed as
// [C_out, rows] and the patches as [rows, cols].
template <typename T>
DiffTensor<T> conv_forward(const DiffTensor<T>& x, const DiffTensor<T>& w, const DiffTensor<T>& b,
                           const PatchKey& key, bool spatial3d, bool fault_hook) {
  const PatchIndex& p = patch_index(key);
  const Index cout = w.dim(0);
  if (b.defined() && b.numel() != cout) throw ShapeError("conv: bias length != output channels");
  auto cols = std::make_shared<RowMat<T>>(im2col<T>(p, x.data()));
  MapCRM<T> W(w.data().data(), cout, p.rows);
  Shape out_shape = spatial3d ? Shape{cout, p.od, p.oh, p.ow} : Shape{cout, p.oh, p.ow};
  DiffTensor<T> res(out_shape);
  MapRM<T> out(res.data().data(), cout, p.cols);
  out.noalias() = W * (*cols);
  if (b.defined()) {
    const auto B = b.data();
    for (Index o = 0; o < cout; ++o) out.row(o).array() += B[o];
  }
  if (tracking({&x, &w, &b})) {
    record(res, [xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr,
                 on = res.node(), cols, &p, cout, fault_hook] {
      if (on->grad.empty()) return;
      MapCRM<T> g(on->grad.data(), cout, p.cols);
      if (wn->requires_grad) {
        MapRM<T> gw(wn->grad_buffer().data(), cout, p.rows);
        if (fault_hook && testing::conv2d_backward_fault())
          gw.noalias() += T(1.001) * (g * cols->transpose());
        else
          gw.noalias() += g * cols->transpose();
      }
      if (bn && bn->requires_grad) {
        auto gb = bn->grad_buffer();
        for (Index o = 0; o < cout; ++o) gb[o] += g.row(o).sum();
      }
      if (xn->requires_grad) {
        MapCRM<T> W(wn->value.data(), cout, p.rows);
        RowMat<T> gcols = W.transpose() * g;
        col2im_add<T>(p, gcols.data(), xn->grad_buffer());
      }
    });
  }
  return res;
}

}  // namespace

template <typename T>
DiffTensor<T> add(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return g; });
}

template <typename T>
DiffTensor<T> sub(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return -g; });
}

template <typename T>
DiffTensor<T> mul(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
DiffTensor<T> scale(const DiffTensor<T>& a, T s) {
  return unary_op<T>(
      a, [s](T x) { return s * x; }, [s](T, T, T g) { return s * g; });
}

template <typename T>
DiffTensor<T> relu(const DiffTensor<T>& a) {
  return unary_op<T>(
      a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T, T g) { return x > T(0) ? g : T(0); });
}

template <typename T>
DiffTensor<T> gelu(const DiffTensor<T>& a) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary_op<T>(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T, T g) {
        const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        return g * (cdf + x * pdf);
      });
}

template <typename T>
DiffTensor<T> softplus(const DiffTensor<T>& a) {
  return unary_op<T>(
      a, [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](T x, T, T g) { return g / (T(1) + std::exp(-x)); });
}

template <typename T>
DiffTensor<T> matmul(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects 2-D operands, got " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul inner dimension mismatch: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  DiffTensor<T> res(Shape{m, n});
  MapRM<T>(res.data().data(), m, n).noalias() =
      MapCRM<T>(a.data().data(), m, k) * MapCRM<T>(b.data().data(), k, n);
  if (tracking({&a, &b})) {
    record(res, [an = a.node(), bn = b.node(), on = res.node(), m, k, n] {
      if (on->grad.empty()) return;
      MapCRM<T> g(on->grad.data(), m, n);
      if (an->requires_grad)
        MapRM<T>(an->grad_buffer().data(), m, k).noalias() +=
            g * MapCRM<T>(bn->value.data(), k, n).transpose();
      if (bn->requires_grad)
        MapRM<T>(bn->grad_buffer().data(), k, n).noalias() +=
            MapCRM<T>(an->value.data(), m, k).transpose() * g;
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> bmm(const DiffTensor<T>& a, const DiffTensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw ShapeError("bmm shape mismatch: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  const Index B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  DiffTensor<T> res(Shape{B, m, n});
  for (Index i = 0; i < B; ++i)
    MapRM<T>(res.data().data() + i * m * n, m, n).noalias() =
        MapCRM<T>(a.data().data() + i * m * k, m, k) *
        MapCRM<T>(b.data().data() + i * k * n, k, n);
  if (tracking({&a, &b})) {
    record(res, [an = a.node(), bn = b.node(), on = res.node(), B, m, k, n] {
      if (on->grad.empty()) return;
      for (Index i = 0; i < B; ++i) {
        MapCRM<T> g(on->grad.data() + i * m * n, m, n);
        if (an->requires_grad)
          MapRM<T>(an->grad_buffer().data() + i * m * k, m, k).noalias() +=
              g * MapCRM<T>(bn->value.data() + i * k * n, k, n).transpose();
        if (bn->requires_grad)
          MapRM<T>(bn->grad_buffer().data() + i * k * n, k, n).noalias() +=
              MapCRM<T>(an->value.data() + i * m * k, m, k).transpose() * g;
      }
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> reshape(const DiffTensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape) +
                     " changes element count");
  DiffTensor<T> res(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    record(res, [xn = x.node(), on = res.node()] {
      if (on->grad.empty()) return;
      auto gx = xn->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> permute(const DiffTensor<T>& x, const std::vector<int>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axis count does not match rank");
  std::vector<bool> seen(r, false);
  for (int a : axes) {
    if (a < 0 || static_cast<std::size_t>(a) >= r || seen[a])
      throw ShapeError("permute: axes are not a permutation");
    seen[a] = true;
  }
  const Shape& in = x.shape();
  std::vector<Index> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  std::vector<Index> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[axes[i]];
    step[i] = in_stride[axes[i]];
  }
  const Index n = x.numel();
  std::vector<Index> index(static_cast<std::size_t>(n));
  std::vector<Index> ctr(r, 0);
  Index src = 0;
  for (Index i = 0; i < n; ++i) {
    index[i] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      src += step[ax];
      if (++ctr[ax] < out[ax]) break;
      src -= step[ax] * out[ax];
      ctr[ax] = 0;
    }
  }
  return gather_impl(x, std::move(out), std::move(index));
}

template <typename T>
DiffTensor<T> gather(const DiffTensor<T>& x, Shape out_shape, std::span<const Index> index) {
  return gather_impl(x, std::move(out_shape), std::vector<Index>(index.begin(), index.end()));
}

template <typename T>
DiffTensor<T> concat(const std::vector<DiffTensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts.front().shape();
  if (shape.empty()) throw ShapeError("concat requires rank >= 1");
  Index lead = 0;
  std::vector<T> out;
  for (const auto& p : parts) {
    if (p.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      throw ShapeError("concat: trailing shapes differ " + to_string(shape) + " vs " +
                       to_string(p.shape()));
    lead += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  shape[0] = lead;
  DiffTensor<T> res(shape, std::move(out));
  bool any = false;
  if (Tape<T>::active())
    for (const auto& p : parts) any = any || p.requires_grad();
  if (any) {
    std::vector<std::shared_ptr<TensorNode<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    record(res, [nodes = std::move(nodes), on = res.node()] {
      if (on->grad.empty()) return;
      std::size_t off = 0;
      for (const auto& pn : nodes) {
        if (pn->requires_grad) {
          auto g = pn->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += on->grad[off + i];
        }
        off += pn->value.size();
      }
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> sum(const DiffTensor<T>& x) {
  T s = T(0);
  for (T v : x.data()) s += v;
  DiffTensor<T> res = DiffTensor<T>::scalar(s);
  if (tracking({&x})) {
    record(res, [xn = x.node(), on = res.node()] {
      if (on->grad.empty()) return;
      const T g = on->grad[0];
      for (T& v : xn->grad_buffer()) v += g;
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> mean(const DiffTensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
DiffTensor<T> l1(const DiffTensor<T>& x) {
  const Index n = x.numel();
  T s = T(0);
  for (T v : x.data()) s += std::abs(v);
  DiffTensor<T> res = DiffTensor<T>::scalar(s / static_cast<T>(n));
  if (tracking({&x})) {
    record(res, [xn = x.node(), on = res.node(), n] {
      if (on->grad.empty()) return;
      const T g = on->grad[0] / static_cast<T>(n);
      auto gx = xn->grad_buffer();
      for (Index i = 0; i < n; ++i) {
        const T v = xn->value[i];
        gx[i] += v > T(0) ? g : (v < T(0) ? -g : T(0));
      }
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> add_bias_last(const DiffTensor<T>& x, const DiffTensor<T>& bias) {
  const Index n = bias.numel();
  if (x.rank() == 0 || x.shape().back() != n)
    throw ShapeError("add_bias_last: last axis of " + to_string(x.shape()) + " != bias length " +
                     std::to_string(n));
  const Index rows = x.numel() / n;
  DiffTensor<T> res(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
  MapRM<T>(res.data().data(), rows, n).rowwise() +=
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), n);
  if (tracking({&x, &bias})) {
    record(res, [xn = x.node(), bn = bias.node(), on = res.node(), rows, n] {
      if (on->grad.empty()) return;
      MapCRM<T> g(on->grad.data(), rows, n);
      if (xn->requires_grad) MapRM<T>(xn->grad_buffer().data(), rows, n) += g;
      if (bn->requires_grad)
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn->grad_buffer().data(), n) +=
            g.colwise().sum();
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> softmax(const DiffTensor<T>& x, std::span<const std::uint8_t> allowed) {
  if (x.rank() == 0) throw ShapeError("softmax of a scalar");
  const Index n = x.shape().back();
  const Index rows = x.numel() / n;
  const bool masked = !allowed.empty();
  if (masked && static_cast<Index>(allowed.size()) != x.numel())
    throw ShapeError("softmax: mask size does not match input");
  const auto X = x.data();
  std::vector<T> out(static_cast<std::size_t>(x.numel()), T(0));
  for (Index r = 0; r < rows; ++r) {
    const Index base = r * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (Index j = 0; j < n; ++j)
      if (!masked || allowed[base + j]) mx = std::max(mx, X[base + j]);
    if (mx == -std::numeric_limits<T>::infinity())
      throw NumericsError("softmax: row with no allowed entries");
    T z = T(0);
    for (Index j = 0; j < n; ++j)
      if (!masked || allowed[base + j]) z += (out[base + j] = std::exp(X[base + j] - mx));
    for (Index j = 0; j < n; ++j) out[base + j] /= z;
  }
  DiffTensor<T> res(x.shape(), std::move(out));
  if (tracking({&x})) {
    record(res, [xn = x.node(), on = res.node(), rows, n] {
      if (on->grad.empty()) return;
      auto gx = xn->grad_buffer();
      const auto& y = on->value;
      const auto& g = on->grad;
      for (Index r = 0; r < rows; ++r) {
        const Index base = r * n;
        T dot = T(0);
        for (Index j = 0; j < n; ++j) dot += y[base + j] * g[base + j];
        for (Index j = 0; j < n; ++j) gx[base + j] += y[base + j] * (g[base + j] - dot);
      }
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> layer_norm(const DiffTensor<T>& x, const DiffTensor<T>& gamma,
                         const DiffTensor<T>& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm of a scalar");
  const Index n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n)
    throw ShapeError("layer_norm: affine parameters must have length " + std::to_string(n));
  const Index rows = x.numel() / n;
  auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const auto X = x.data();
  const auto G = gamma.data();
  const auto B = beta.data();
  for (Index r = 0; r < rows; ++r) {
    const Index base = r * n;
    T mu = T(0);
    for (Index j = 0; j < n; ++j) mu += X[base + j];
    mu /= static_cast<T>(n);
    T var = T(0);
    for (Index j = 0; j < n; ++j) var += (X[base + j] - mu) * (X[base + j] - mu);
    var /= static_cast<T>(n);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = is;
    for (Index j = 0; j < n; ++j) {
      const T h = (X[base + j] - mu) * is;
      (*xhat)[base + j] = h;
      out[base + j] = G[j] * h + B[j];
    }
  }
  DiffTensor<T> res(x.shape(), std::move(out));
  if (tracking({&x, &gamma, &beta})) {
    record(res, [xn = x.node(), gn = gamma.node(), bn = beta.node(), on = res.node(), xhat,
                 inv_std, rows, n] {
      if (on->grad.empty()) return;
      const auto& g = on->grad;
      const auto& gam = gn->value;
      if (gn->requires_grad) {
        auto gg = gn->grad_buffer();
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < n; ++j) gg[j] += g[r * n + j] * (*xhat)[r * n + j];
      }
      if (bn->requires_grad) {
        auto gb = bn->grad_buffer();
        for (Index r = 0; r < rows; ++r)
          for (Index j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
      if (xn->requires_grad) {
        auto gx = xn->grad_buffer();
        for (Index r = 0; r < rows; ++r) {
          const Index base = r * n;
          T m1 = T(0), m2 = T(0);
          for (Index j = 0; j < n; ++j) {
            const T dh = g[base + j] * gam[j];
            m1 += dh;
            m2 += dh * (*xhat)[base + j];
          }
          m1 /= static_cast<T>(n);
          m2 /= static_cast<T>(n);
          for (Index j = 0; j < n; ++j) {
            const T dh = g[base + j] * gam[j];
            gx[base + j] += (*inv_std)[r] * (dh - m1 - (*xhat)[base + j] * m2);
          }
        }
      }
    });
  }
  return res;
}

template <typename T>
DiffTensor<T> conv2d(const DiffTensor<T>& x, const DiffTensor<T>& w, const DiffTensor<T>& b,
                     ConvGeometry geom) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv2d expects x [C,H,W] and w [Cout,Cin,kh,kw], got " +
                     to_string(x.shape()) + " and " + to_string(w.shape()));
  if (w.dim(1) != x.dim(0))
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(x.dim(0)) +
                     " channels, weight expects " + std::to_string(w.dim(1)));
  if (geom.stride < 1 || geom.pad < 0) throw ShapeError("conv2d: invalid stride/padding");
  if (geom.mode == PadMode::circular && (geom.pad > x.dim(1) || geom.pad > x.dim(2)))
    throw ShapeError("conv2d: circular padding exceeds input extent");
  const PatchKey key{x.dim(0), 1,           x.dim(1),    x.dim(2), 1, w.dim(2), w.dim(3), 1,
                     geom.stride, geom.stride, 0, geom.pad, geom.pad,
                     geom.mode == PadMode::circular ? 1 : 0};
  return conv_forward(x, w, b, key, false, true);
}

template <typename T>
DiffTensor<T> conv3d(const DiffTensor<T>& x, const DiffTensor<T>& w, const DiffTensor<T>& b) {
  if (x.rank() != 4 || w.rank() != 5)
    throw ShapeError("conv3d expects x [C,D,H,W] and w [Cout,Cin,kd,kh,kw], got " +
                     to_string(x.shape()) + " and " + to_string(w.shape()));
  if (w.dim(1) != x.dim(0))
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(x.dim(0)) +
                     " channels, weight expects " + std::to_string(w.dim(1)));
  if (w.dim(2) % 2 == 0 || w.dim(3) % 2 == 0 || w.dim(4) % 2 == 0)
    throw ShapeError("conv3d same padding needs odd kernel extents");
  const PatchKey key{x.dim(0),     x.dim(1),     x.dim(2),     x.dim(3), w.dim(2),
                     w.dim(3),     w.dim(4),     1,            1,        1,
                     w.dim(2) / 2, w.dim(3) / 2, w.dim(4) / 2, 0};
  return conv_forward(x, w, b, key, true, false);
}

template <typename T>
DiffTensor<T> conv_transpose2d(const DiffTensor<T>& x, const DiffTensor<T>& w,
                               const DiffTensor<T>& b, Index stride) {
  if (x.rank() != 3 || w.rank() != 4)
    throw ShapeError("conv_transpose2d expects x [C,h,w] and w [Cin,Cout,kh,kw], got " +
                     to_string(x.shape()) + " and " + to_string(w.shape()));
  if (w.dim(0) != x.dim(0))
    throw ShapeError("conv_transpose2d channel mismatch: input has " + std::to_string(x.dim(0)) +
                     " channels, weight expects " + std::to_string(w.dim(0)));
  if (stride < 1) throw ShapeError("conv_transpose2d: stride must be positive");
  const Index cin = x.dim(0), cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const Index H = (x.dim(1) - 1) * stride + kh;
  const Index W = (x.dim(2) - 1) * stride + kw;
  if (b.defined() && b.numel() != cout)
    throw ShapeError("conv_transpose2d: bias length != output channels");
  const PatchIndex& p =
      patch_index(PatchKey{cout, 1, H, W, 1, kh, kw, 1, stride, stride, 0, 0, 0, 0});
  MapCRM<T> Wm(w.data().data(), cin, p.rows);
  MapCRM<T> X(x.data().data(), cin, p.cols);
  RowMat<T> cols = Wm.transpose() * X;
  DiffTensor<T> res(Shape{cout, H, W});
  col2im_add<T>(p, cols.data(), res.data());
  if (b.defined()) {
    const auto B = b.data();
    auto out = res.data();
    for (Index o = 0; o < cout; ++o)
      for (Index i = 0; i < H * W; ++i) out[o * H * W + i] += B[o];
  }
  if (tracking({&x, &w, &b})) {
    record(res, [xn = x.node(), wn = w.node(), bn = b.defined() ? b.node() : nullptr,
                 on = res.node(), &p, cin, cout, H, W] {
      if (on->grad.empty()) return;
      const RowMat<T> gcols = im2col<T>(p, on->grad);
      if (xn->requires_grad)
        MapRM<T>(xn->grad_buffer().data(), cin, p.cols).noalias() +=
            MapCRM<T>(wn->value.data(), cin, p.rows) * gcols;
      if (wn->requires_grad)
        MapRM<T>(wn->grad_buffer().data(), cin, p.rows).noalias() +=
            MapCRM<T>(xn->value.data(), cin, p.cols) * gcols.transpose();
      if (bn && bn->requires_grad) {
        auto gb = bn->grad_buffer();
        for (Index o = 0; o < cout; ++o)
          for (Index i = 0; i < H * W; ++i) gb[o] += on->grad[o * H * W + i];
      }
    });
  }
  return res;
}

#define HSF_INSTANTIATE_OPS(T)                                                                   \
  template DiffTensor<T> add(const DiffTensor<T>&, const DiffTensor<T>&);                        \
  template DiffTensor<T> sub(const DiffTensor<T>&, const DiffTensor<T>&);                        \
  template DiffTensor<T> mul(const DiffTensor<T>&, const DiffTensor<T>&);                        \
  template DiffTensor<T> scale(const DiffTensor<T>&, T);                                         \
  template DiffTensor<T> relu(const DiffTensor<T>&);                                             \
  template DiffTensor<T> gelu(const DiffTensor<T>&);                                             \
  template DiffTensor<T> softplus(const DiffTensor<T>&);                                         \
  template DiffTensor<T> matmul(const DiffTensor<T>&, const DiffTensor<T>&);                     \
  template DiffTensor<T> bmm(const DiffTensor<T>&, const DiffTensor<T>&);                        \
  template DiffTensor<T> reshape(const DiffTensor<T>&, Shape);                                   \
  template DiffTensor<T> permute(const DiffTensor<T>&, const std::vector<int>&);                 \
  template DiffTensor<T> gather(const DiffTensor<T>&, Shape, std::span<const Index>);            \
  template DiffTensor<T> concat(const std::vector<DiffTensor<T>>&);                              \
  template DiffTensor<T> sum(const DiffTensor<T>&);                                              \
  template DiffTensor<T> mean(const DiffTensor<T>&);                                             \
  template DiffTensor<T> l1(const DiffTensor<T>&);                                               \
  template DiffTensor<T> add_bias_last(const DiffTensor<T>&, const DiffTensor<T>&);              \
  template DiffTensor<T> softmax(const DiffTensor<T>&, std::span<const std::uint8_t>);           \
  template DiffTensor<T> layer_norm(const DiffTensor<T>&, const DiffTensor<T>&,                  \
                                    const DiffTensor<T>&, double);                               \
  template DiffTensor<T> conv2d(const DiffTensor<T>&, const DiffTensor<T>&, const DiffTensor<T>&, \
                                ConvGeometry);                                                   \
  template DiffTensor<T> conv3d(const DiffTensor<T>&, const DiffTensor<T>&, const DiffTensor<T>&); \
  template DiffTensor<T> conv_transpose2d(const DiffTensor<T>&, const DiffTensor<T>&,            \
                                          const DiffTensor<T>&, Index);

HSF_INSTANTIATE_OPS(float)
HSF_INSTANTIATE_OPS(double)

}  // namespace hsf
