#include "hsf/selftest.hpp"

#include <Eigen/Dense>

#include <chrono>
#include <cstdio>
#include <functional>

#include "hsf/gradcheck.hpp"
#include "hsf/metrics.hpp"
#include "hsf/net.hpp"
#include "hsf/solver.hpp"

namespace hsf {

namespace {

using D = DiffTensor<double>;

D random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return D(std::move(shape), std::move(v));
}

void randomize(const ParamSet<double>& ps, Rng& rng, double amplitude = 0.5) {
  for (const auto& [_, t] : ps.entries())
    for (double& v : t.data()) v = rng.uniform(-amplitude, amplitude);
}

/// Scalar probe 1/2 ||out - t||^2 against a fixed random target. Every term
/// is non-negative, so the sum has no cancellation and finite differences
/// stay well above round-off.
D probe(const D& out, Rng& rng) {
  const D diff = sub(out, random_tensor(out.shape(), rng));
  return scale(sum(mul(diff, diff)), 0.5);
}

CheckResult grad_check(const std::string& name, bool uses_conv2d, double tol, std::vector<D> params,
                       const std::function<D()>& loss) {
  const GradcheckReport r = gradcheck(loss, params, tol);
  return {name, r.max_rel_error, tol, r.passed, uses_conv2d};
}

CheckResult bound_check(const std::string& name, double err, double tol) {
  return {name, err, tol, err < tol, false};
}

std::vector<CheckResult> op_gradchecks(std::uint64_t seed) {
  constexpr double tol = 1e-6;
  std::vector<CheckResult> out;
  Rng rng(seed);

  {
    D a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng), s = random_tensor({1}, rng);
    D w = random_tensor({3, 4}, rng);
    out.push_back(grad_check("elementwise", false, tol, {a, b, s}, [=] {
      return sum(mul(w, add(mul(gelu(a), softplus(b)), scale(sub(mul(s, a), b), 0.5))));
    }));
  }
  {
    D a = random_tensor({3, 5}, rng), b = random_tensor({5, 2}, rng);
    D p = random_tensor({2, 3, 4}, rng), q = random_tensor({2, 4, 3}, rng);
    D w1 = random_tensor({3, 2}, rng), w2 = random_tensor({2, 3, 3}, rng);
    out.push_back(grad_check("matmul_bmm", false, tol, {a, b, p, q}, [=] {
      return add(sum(mul(w1, matmul(a, b))), sum(mul(w2, bmm(p, q))));
    }));
  }
  {
    D x = random_tensor({2, 3, 4}, rng, -2.0, 2.0), w = random_tensor({2, 3, 4}, rng);
    std::vector<std::uint8_t> allowed(24, 1);
    allowed[1] = allowed[6] = allowed[7] = allowed[13] = 0;
    out.push_back(grad_check("softmax_masked", false, tol, {x}, [=] { return sum(mul(w, softmax(x, allowed))); }));
  }
  {
    D x = random_tensor({4, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
    D w = random_tensor({4, 6}, rng);
    out.push_back(grad_check("layer_norm", false, tol, {x, g, b}, [=] { return sum(mul(w, layer_norm(x, g, b))); }));
  }
  {
    D x = random_tensor({2, 3, 4}, rng), y = random_tensor({1, 3, 4}, rng);
    std::vector<Index> idx = {0, 5, -1, 7, 7, 23, 11, 2};
    Rng r2 = rng.split(7);
    out.push_back(grad_check("reshape_permute_gather_concat", false, tol, {x, y}, [=]() mutable {
      Rng local = r2;
      D c = concat<double>({x, y});
      D p = permute(c, {2, 0, 1});
      D g = gather(reshape(x, {24}), {2, 4}, idx);
      return add(probe(p, local), probe(g, local));
    }));
  }
  {
    D x = random_tensor({3, 6, 5}, rng), w = random_tensor({4, 3, 3, 3}, rng), b = random_tensor({4}, rng);
    Rng r2 = rng.split(8);
    out.push_back(grad_check("conv2d_zero_pad", true, tol, {x, w, b}, [=]() mutable {
      Rng local = r2;
      return probe(conv2d(x, w, b, {1, 1, PadMode::zero}), local);
    }));
  }
  {
    D x = random_tensor({2, 6, 8}, rng), w = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    Rng r2 = rng.split(9);
    out.push_back(grad_check("conv2d_circular_stride2", true, tol, {x, w, b}, [=]() mutable {
      Rng local = r2;
      return probe(conv2d(x, w, b, {2, 1, PadMode::circular}), local);
    }));
  }
  {
    D x = random_tensor({2, 4, 5, 3}, rng), w = random_tensor({2, 2, 3, 3, 3}, rng), b = random_tensor({2}, rng);
    Rng r2 = rng.split(10);
    out.push_back(grad_check("conv3d", false, tol, {x, w, b}, [=]() mutable {
      Rng local = r2;
      return probe(conv3d(x, w, b), local);
    }));
  }
  {
    D x = random_tensor({3, 3, 4}, rng), w = random_tensor({3, 2, 2, 2}, rng), b = random_tensor({2}, rng);
    Rng r2 = rng.split(11);
    out.push_back(grad_check("conv_transpose2d", false, tol, {x, w, b}, [=]() mutable {
      Rng local = r2;
      return probe(conv_transpose2d(x, w, b, 2), local);
    }));
  }
  {
    ParamSet<double> ps;
    Rng init = rng.split(12);
    auto p = make_window_attention(ps, init, "attn", 8, 4, 2, 2);
    randomize(ps, init);
    D x = random_tensor({8, 8, 8}, rng);  // [H, W, C]
    const auto mask = shifted_window_mask(8, 8, 4, 2);
    std::vector<D> params = ps.tensors();
    params.push_back(x);
    Rng r2 = rng.split(13);
    out.push_back(grad_check("window_attention_shifted", false, tol, params, [=]() mutable {
      Rng local = r2;
      return probe(window_attention(window_partition(roll2d(x, -2, -2), 4), p, mask), local);
    }));
  }
  {
    ParamSet<double> ps;
    Rng init = rng.split(14);
    auto p = make_swin_layer(ps, init, "stl", 4, 4, 2, 2.0, 2);
    randomize(ps, init);
    D x = random_tensor({6, 5, 4}, rng);  // not a multiple of the window: exercises pad/crop
    std::vector<D> params = ps.tensors();
    params.push_back(x);
    Rng r2 = rng.split(15);
    out.push_back(grad_check("swin_layer_shifted_padded", false, tol, params, [=]() mutable {
      Rng local = r2;
      return probe(swin_layer(x, p), local);
    }));
  }
  {
    FusionConfig c;
    c.stages = 1, c.scale = 2, c.hsi_bands = 3, c.msi_bands = 2, c.prior_dim = 4, c.heads = 2, c.window = 4;
    c.n_stl = 0, c.n_conv3d = 0, c.seed = seed;
    FusionNet<double> net(c);
    randomize(net.params(), rng);
    const auto& sp = net.stage(0);
    D x = random_tensor({3, 8, 8}, rng), y = random_tensor({2, 8, 8}, rng), z = random_tensor({3, 4, 4}, rng);
    std::vector<D> params;
    for (const auto& t : {sp.r_conv.weight, sp.r_conv.bias, sp.rT_conv.weight, sp.rT_conv.bias,
                          sp.c_convs[0].weight, sp.c_convs[0].bias, sp.cT_convs[0].weight,
                          sp.cT_convs[0].bias, sp.eta_raw})
      params.push_back(t);
    params.push_back(x);
    Rng r2 = rng.split(16);
    out.push_back(grad_check("data_module", true, tol, params, [=]() mutable {
      Rng local = r2;
      return probe(data_module(x, y, z, sp), local);
    }));
  }
  return out;
}

FusionConfig toy_net_config(std::uint64_t seed) {
  FusionConfig c;
  c.stages = 1, c.scale = 2, c.hsi_bands = 4, c.msi_bands = 2, c.prior_dim = 8, c.heads = 2, c.window = 4;
  c.n_stl = 2, c.n_conv3d = 2, c.conv3d_channels = 2, c.seed = seed;
  return c;
}

std::vector<CheckResult> network_gradchecks(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed ^ 0x5eedULL);
  {
    FusionNet<double> net(toy_net_config(seed));
    randomize(net.params(), rng, 0.3);
    const auto& pr = net.stage(0).prior;
    D v = random_tensor({4, 16, 16}, rng, 0.0, 1.0);
    D dense = random_tensor({8, 16, 16}, rng, -0.5, 0.5);
    std::vector<D> params;
    for (const auto& [name, t] : net.params().entries())
      if (name.find("prior.") != std::string::npos) params.push_back(t);
    params.push_back(v);
    Rng r2 = rng.split(1);
    out.push_back(grad_check("prior_module", true, 1e-4, params, [=]() mutable {
      Rng local = r2;
      return probe(prior_module(v, dense, pr).first, local);
    }));
  }
  {
    FusionNet<double> net(toy_net_config(seed + 1));
    randomize(net.params(), rng, 0.3);
    D y = random_tensor({2, 16, 16}, rng, 0.0, 1.0), z = random_tensor({4, 8, 8}, rng, 0.0, 1.0);
    Rng r2 = rng.split(2);
    out.push_back(grad_check("full_network_one_stage", true, 1e-4, net.params().tensors(), [=, &net]() mutable {
      Rng local = r2;
      return probe(net.forward(y, z), local);
    }));
  }
  return out;
}

/// Dense matrix of blur + decimation on one band, built tap by tap.
Eigen::MatrixXd dense_degradation(Index W, Index H, const Eigen::MatrixXd& k, Index d) {
  const Index w = W / d, h = H / d, ar = (k.rows() - 1) / 2, ac = (k.cols() - 1) / 2;
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(w * h, W * H);
  for (Index i = 0; i < h; ++i)
    for (Index j = 0; j < w; ++j)
      for (Index a = 0; a < k.rows(); ++a)
        for (Index b = 0; b < k.cols(); ++b) {
          const Index r = ((d * i + a - ar) % H + H) % H, c = ((d * j + b - ac) % W + W) % W;
          C(i * w + j, r * W + c) += k(a, b);
        }
  return C;
}

HsiCube random_cube(Index W, Index H, Index S, Rng& rng) {
  HsiCube c(W, H, S);
  for (Index i = 0; i < c.size(); ++i) c.data()[i] = rng.uniform();
  return c;
}

std::vector<CheckResult> model_checks(std::uint64_t seed) {
  std::vector<CheckResult> out;
  Rng rng(seed ^ 0xad701ULL);

  {
    const SpatialDegradation<double> C{gaussian_kernel(8, 2.0), 4};
    const auto R = synthetic_response(6, 3);
    double worst_c = 0.0, worst_r = 0.0;
    for (int t = 0; t < 100; ++t) {
      const HsiCube x = random_cube(16, 12, 6, rng), y = random_cube(4, 3, 6, rng);
      const double lhs = apply_C(x, C).data().dot(y.data());
      const double rhs = x.data().dot(apply_CT(y, C, 16, 12).data());
      worst_c = std::max(worst_c, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
      const HsiCube m = random_cube(16, 12, 3, rng);
      const double l2 = apply_R(x, R).data().dot(m.data()), r2 = x.data().dot(apply_RT(m, R).data());
      worst_r = std::max(worst_r, std::abs(l2 - r2) / std::max(1.0, std::abs(l2)));
    }
    out.push_back(bound_check("adjoint_explicit_C", worst_c, 1e-10));
    out.push_back(bound_check("adjoint_explicit_R", worst_r, 1e-10));
  }
  {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      D w = random_tensor({3, 3, 2, 2}, rng), none;
      D x = random_tensor({3, 8, 6}, rng), y = random_tensor({3, 4, 3}, rng);
      NoGradGuard<double> g;
      const double lhs = conv2d(x, w, none, {2, 0, PadMode::zero}).vec().dot(y.vec());
      const double rhs = x.vec().dot(conv_transpose2d(y, w, none, 2).vec());
      worst = std::max(worst, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    }
    out.push_back(bound_check("adjoint_learned_pair_tied", worst, 1e-10));
  }
  {
    // Frozen data module vs eta((XR - Y)R^T + C^T(CX - Z)) with dense matrices.
    const Index W = 8, H = 8, S = 4, s = 2, d = 2;
    FusionConfig c;
    c.stages = 1, c.scale = d, c.hsi_bands = S, c.msi_bands = s, c.prior_dim = 4, c.heads = 1;
    c.n_stl = 0, c.n_conv3d = 0, c.seed = seed;
    FusionNet<double> net(c);
    const auto R = synthetic_response(S, s);
    Eigen::MatrixXd k(2, 2);
    k << 0.4, 0.3, 0.2, 0.1;
    auto& sp = net.stage(0);
    load_explicit_operators(sp, R.matrix, {k});
    const double eta = 0.37;
    set_eta(sp, eta);
    const HsiCube X = random_cube(W, H, S, rng), Y = random_cube(W, H, s, rng), Z = random_cube(W / d, H / d, S, rng);
    const Eigen::MatrixXd Cd = dense_degradation(W, H, k, d);
    const Eigen::MatrixXd xm = X.as_matrix();
    const Eigen::MatrixXd expect =
        eta * ((xm * R.matrix - Y.as_matrix()) * R.matrix.transpose() +
               Cd.transpose() * (Cd * xm - Z.as_matrix()));
    NoGradGuard<double> g;
    const HsiCube got = to_cube(data_module(to_tensor<double>(X), to_tensor<double>(Y), to_tensor<double>(Z), sp));
    out.push_back(bound_check("data_module_matches_matrix_step", (got.as_matrix() - expect).cwiseAbs().maxCoeff(), 1e-5));
  }
  {
    // Quadratic-prior proximal gradient vs the normal equations.
    const Index W = 8, H = 8, S = 4, s = 2, d = 2, N = W * H;
    FusionProblem<double> p;
    p.response = synthetic_response(S, s);
    p.degradation = {gaussian_kernel(4, 1.0), d};
    const HsiCube truth = random_cube(W, H, S, rng);
    p.msi = apply_R(truth, p.response);
    p.hsi = apply_C(truth, p.degradation);
    p.lambda = 0.05;
    p.prior = PriorKind::quadratic;
    SolveOptions so;
    so.max_iters = 10000;
    so.rel_tol = 0.0;
    const auto res = solve(p, so);
    const Eigen::MatrixXd Cd = dense_degradation(W, H, p.degradation.kernel, d);
    const Eigen::MatrixXd RRt = p.response.matrix * p.response.matrix.transpose();
    const Eigen::MatrixXd CtC = Cd.transpose() * Cd;
    // vec(X RR^T + C^T C X + lambda X) = (RR^T (x) I + I (x) C^T C + lambda I) vec X
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(N * S, N * S);
    for (Index a = 0; a < S; ++a)
      for (Index b = 0; b < S; ++b) {
        A.block(a * N, b * N, N, N).diagonal().array() += RRt(a, b);
        if (a == b) A.block(a * N, a * N, N, N) += CtC;
      }
    A.diagonal().array() += p.lambda;
    const Eigen::MatrixXd rhs_m = p.msi.as_matrix() * p.response.matrix.transpose() + Cd.transpose() * p.hsi.as_matrix();
    const Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(rhs_m.data(), rhs_m.size());
    const Eigen::VectorXd xs = A.ldlt().solve(rhs);
    out.push_back(bound_check("solver_matches_normal_equations", (res.x.data() - xs).norm() / xs.norm(), 1e-5));

    p.lambda = 0.0;
    p.prior = PriorKind::none;
    so.max_iters = 2000;
    const auto plain = solve(p, so);
    double worst_rise = 0.0;
    for (std::size_t i = 1; i < plain.trace.size(); ++i)
      worst_rise = std::max(worst_rise, (plain.trace[i] - plain.trace[i - 1]) / std::max(plain.trace[0], 1e-300));
    out.push_back(bound_check("solver_trace_monotone", worst_rise, 1e-12));
  }
  {
    const HsiCube ref = random_cube(16, 16, 4, rng);
    const MetricsReport m = evaluate(ref, ref, 4.0);
    const double err = std::max({std::abs(m.psnr - kPsnrCap), std::abs(m.sam), std::abs(m.ergas), std::abs(m.ssim - 1.0)});
    out.push_back(bound_check("metrics_identity", err, 1e-12));
    HsiCube shifted = ref;
    shifted.data().array() += 0.1;
    HsiCube one(4, 4, 1, 1.0), off(4, 4, 1, 1.1);
    const double e1 = std::abs(ergas(off, one, 8.0) - 1.25);
    const double e2 = std::abs(psnr(off, one) - 20.0);
    HsiCube u(2, 2, 2), v(2, 2, 2);
    u.band(0).setOnes();
    v.band(1).setOnes();
    const double e3 = std::abs(sam(u, v) - 90.0);
    out.push_back(bound_check("metrics_closed_forms", std::max({e1, e2, e3}), 1e-9));
    out.push_back(bound_check("ssim_below_one_under_shift", ssim(shifted, ref) < 1.0 ? 0.0 : 1.0, 0.5));
  }
  {
    FusionConfig c = toy_net_config(seed);
    c.stages = 2;
    FusionNet<double> net(c);
    for (int k = 0; k < c.stages; ++k) {
      set_eta(net.stage(k), 0.0);
      zero_prior_head(net.stage(k));
    }
    const HsiCube z = random_cube(8, 8, 4, rng), y = random_cube(16, 16, 2, rng);
    const HsiCube expect = bicubic_resize_to(z, 16, 16);
    NoGradGuard<double> g;
    const HsiCube got = to_cube(net.forward(to_tensor<double>(y), to_tensor<double>(z)));
    out.push_back(bound_check("identity_stages_return_bicubic", (got.data() - expect.data()).cwiseAbs().maxCoeff(), 1e-12));
  }
  return out;
}

}  // namespace

bool SelftestReport::passed() const {
  for (const auto& c : checks)
    if (!c.passed) return false;
  return !checks.empty();
}

std::string SelftestReport::format() const {
  std::string out;
  char buf[256];
  for (const auto& c : checks) {
    std::snprintf(buf, sizeof buf, "%s  %-34s max_error=%.3e  tolerance=%.0e\n", c.passed ? "PASS" : "FAIL",
                  c.name.c_str(), c.max_error, c.tolerance);
    out += buf;
  }
  return out;
}

SelftestReport run_selftest(const SelftestOptions& opts) {
  SelftestReport r;
  for (auto& c : op_gradchecks(opts.seed)) r.checks.push_back(std::move(c));
  for (auto& c : network_gradchecks(opts.seed)) r.checks.push_back(std::move(c));
  if (!opts.gradchecks_only)
    for (auto& c : model_checks(opts.seed)) r.checks.push_back(std::move(c));
  return r;
}

}  // namespace hsf
