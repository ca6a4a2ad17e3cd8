// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Usage: acceptance OUTPUT_DIR

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "hsf/pipeline.hpp"
#include "hsf/selftest.hpp"
#include "hsf/solver.hpp"
#include "oracles.hpp"

using namespace hsf;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += what + (ok ? "" : " [violated]");
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---- 1: gradient integrity ----

Outcome gradient_integrity(std::ostream& report) {
  Outcome o;
  const auto t0 = Clock::now();
  const SelftestReport r = run_selftest({});
  const double secs = seconds_since(t0);
  report << "# selftest\n" << r.format() << "\n";
  double layer = 0.0, full = 0.0;
  int grads = 0;
  for (const auto& c : r.checks) {
    if (c.name == "prior_module" || c.name == "full_network_one_stage") {
      full = std::max(full, c.max_error);
      ++grads;
    } else if (c.tolerance == 1e-6) {
      layer = std::max(layer, c.max_error);
      ++grads;
    }
  }
  o.require(grads >= 14, std::to_string(grads) + " gradchecks");
  o.require(layer < 1e-6, "max layer rel err " + fmt("%.3e", layer) + " < 1e-6");
  o.require(full < 1e-4, "full graph " + fmt("%.3e", full) + " < 1e-4");
  o.require(r.passed(), "all selftest checks pass");
  o.require(secs < 120.0, "runtime " + fmt("%.1f", secs) + " s < 120 s");
  return o;
}

// ---- 2: adjoint identities ----

Outcome adjoints() {
  Outcome o;
  Rng rng(2024);
  double explicit_c = 0.0, explicit_r = 0.0, learned = 0.0;
  const SpatialDegradation<double> C{gaussian_kernel(8, 2.0), 4};
  const auto R = synthetic_response(8, 3);
  FusionConfig fc;
  fc.scale = 4, fc.hsi_bands = 3, fc.msi_bands = 2, fc.prior_dim = 4, fc.heads = 1, fc.n_stl = 0, fc.n_conv3d = 0;
  FusionNet<double> net(fc);
  NoGradGuard<double> guard;
  for (int t = 0; t < 100; ++t) {
    const HsiCube x = oracle::random_cube(16, 12, 8, rng, -1.0, 1.0);
    const HsiCube y = oracle::random_cube(4, 3, 8, rng, -1.0, 1.0);
    explicit_c = std::max(explicit_c, std::abs(apply_C(x, C).data().dot(y.data()) -
                                               x.data().dot(apply_CT(y, C, 16, 12).data())));
    const HsiCube m = oracle::random_cube(16, 12, 3, rng, -1.0, 1.0);
    explicit_r = std::max(explicit_r, std::abs(apply_R(x, R).data().dot(m.data()) -
                                               x.data().dot(apply_RT(m, R).data())));
    // The network's own downsample/upsample pair with tied weights, one level.
    for (const auto& level : {0, 1}) {
      const auto& cw = net.stage(0).c_convs[static_cast<std::size_t>(level)].weight;
      for (auto& v : cw.data()) v = rng.uniform(-1.0, 1.0);
      const DiffTensor<double> none;
      const auto xt = oracle::random_tensor<double>({3, 8, 6}, rng);
      const auto yt = oracle::random_tensor<double>({3, 4, 3}, rng);
      const double lhs = conv2d(xt, cw, none, {2, 0, PadMode::zero}).vec().dot(yt.vec());
      const double rhs = xt.vec().dot(conv_transpose2d(yt, cw, none, 2).vec());
      learned = std::max(learned, std::abs(lhs - rhs));
    }
  }
  o.require(explicit_c < 1e-10, "explicit C " + fmt("%.2e", explicit_c));
  o.require(explicit_r < 1e-10, "explicit R " + fmt("%.2e", explicit_r));
  o.require(learned < 1e-10, "learned tied pair " + fmt("%.2e", learned));
  o.detail += " (100 trials, max abs)";
  return o;
}

// ---- 3: frozen data module vs dense matrices ----

template <typename T>
double frozen_data_module_error(Rng& rng) {
  const Index W = 8, H = 8, S = 4, s = 2, d = 2;
  FusionConfig c;
  c.stages = 1, c.scale = d, c.hsi_bands = S, c.msi_bands = s, c.prior_dim = 4, c.heads = 1;
  c.n_stl = 0, c.n_conv3d = 0, c.seed = 9;
  FusionNet<T> net(c);
  auto& sp = net.stage(0);
  Eigen::MatrixXd R(S, s), k(2, 2);
  for (Index i = 0; i < R.size(); ++i) R.data()[i] = rng.uniform();
  for (Index i = 0; i < 4; ++i) k.data()[i] = rng.uniform();
  load_explicit_operators(sp, R, {k});
  const double eta = 0.3;
  set_eta(sp, eta);
  const HsiCube X = oracle::random_cube(W, H, S, rng), Y = oracle::random_cube(W, H, s, rng);
  const HsiCube Z = oracle::random_cube(W / d, H / d, S, rng);
  const Eigen::MatrixXd Cd = oracle::degradation_matrix(W, H, k, d);
  const Eigen::MatrixXd Xm = X.as_matrix();
  const Eigen::MatrixXd expect =
      eta * ((Xm * R - Y.as_matrix()) * R.transpose() + Cd.transpose() * (Cd * Xm - Z.as_matrix()));
  NoGradGuard<T> guard;
  const HsiCube got = to_cube(data_module(to_tensor<T>(X), to_tensor<T>(Y), to_tensor<T>(Z), sp));
  return (got.as_matrix() - expect).cwiseAbs().maxCoeff();
}

Outcome unfolding_equivalence() {
  Outcome o;
  Rng rng(77);
  double e64 = 0.0, e32 = 0.0;
  for (int t = 0; t < 10; ++t) {
    e64 = std::max(e64, frozen_data_module_error<double>(rng));
    e32 = std::max(e32, frozen_data_module_error<float>(rng));
  }
  o.require(e64 < 1e-5, "double max-abs " + fmt("%.2e", e64));
  o.require(e32 < 1e-5, "single max-abs " + fmt("%.2e", e32));
  return o;
}

// ---- 4: classical solver ----

Outcome solver_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(4);
  FusionProblem<double> p;
  const HsiCube truth = oracle::random_cube(8, 8, 4, rng);
  p.response = synthetic_response(4, 2);
  p.degradation = {gaussian_kernel(3, 0.8), 2};
  const auto pair = simulate_pair(truth, p.response, p.degradation);
  p.msi = pair.msi;
  p.hsi = pair.hsi;
  p.lambda = 0.05;
  p.prior = PriorKind::quadratic;
  SolveOptions so;
  so.max_iters = 10000;
  so.rel_tol = 0.0;
  const auto res = solve(p, so);
  const Eigen::MatrixXd Cd = oracle::degradation_matrix(8, 8, p.degradation.kernel, 2);
  const Eigen::MatrixXd ref =
      oracle::quadratic_fusion_solution(p.msi.as_matrix(), p.hsi.as_matrix(), p.response.matrix, Cd, p.lambda);
  const double rel = (res.x.as_matrix() - ref).norm() / ref.norm();
  o.require(rel < 1e-5, "rel err " + fmt("%.2e", rel) + " after " + std::to_string(res.iterations) + " iterations");

  p.lambda = 0.0;
  p.prior = PriorKind::none;
  so.max_iters = 10000;
  const auto free = solve(p, so);
  double worst_rise = 0.0;
  int strict_rises = 0;
  for (std::size_t k = 1; k < free.trace.size(); ++k) {
    const double rise = free.trace[k] - free.trace[k - 1];
    if (rise > 0.0) ++strict_rises;
    worst_rise = std::max(worst_rise, rise / free.trace.front());
  }
  // A rise of a few ulps of f(X0) is floating-point round-off of the
  // objective evaluation, not an ascent step.
  o.require(worst_rise < 1e-12, "lambda=0 trace monotone over " + std::to_string(free.trace.size()) +
                                    " values (worst rise " + fmt("%.1e", worst_rise) + " of f0, " +
                                    std::to_string(strict_rises) + " ulp-level rises)");
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "runtime " + fmt("%.2f", secs) + " s < 60 s");
  return o;
}

// ---- 5: metrics ----

Outcome metric_oracles() {
  Outcome o;
  Rng rng(5);
  double worst = 0.0;
  for (int t = 0; t < 5; ++t) {
    const HsiCube ref = oracle::random_cube(32, 32, 4, rng, 0.05, 1.0);
    const HsiCube x = oracle::random_cube(32, 32, 4, rng, 0.05, 1.0);
    worst = std::max({worst, std::abs(psnr(x, ref) - oracle::psnr(x, ref)),
                      std::abs(sam(x, ref) - oracle::sam(x, ref)),
                      std::abs(ergas(x, ref, 4.0) - oracle::ergas(x, ref, 4.0)),
                      std::abs(ssim(x, ref) - oracle::ssim(x, ref))});
  }
  o.require(worst < 1e-6, "max |impl - loop oracle| " + fmt("%.2e", worst));

  const HsiCube ref = oracle::random_cube(32, 32, 4, rng, 0.05, 1.0);
  const MetricsReport id = evaluate(ref, ref, 4.0);
  o.require(id.psnr == kPsnrCap && id.sam == 0.0 && id.ergas == 0.0 && std::abs(id.ssim - 1.0) < 1e-12,
            "identity (" + fmt("%.0f", id.psnr) + ", " + fmt("%g", id.sam) + ", " + fmt("%g", id.ergas) + ", " +
                fmt("%.12f", id.ssim) + ")");

  bool mono = true;
  MetricsReport prev{};
  const double amps[] = {0.005, 0.01, 0.02, 0.05, 0.1};
  for (int i = 0; i < 5; ++i) {
    Rng noise(55);
    HsiCube x = ref;
    for (Index j = 0; j < x.size(); ++j) x.data()[j] += amps[i] * noise.normal();
    const auto m = evaluate(x, ref, 4.0);
    if (i > 0) mono = mono && m.psnr < prev.psnr && m.sam > prev.sam && m.ergas > prev.ergas && m.ssim < prev.ssim;
    prev = m;
  }
  o.require(mono, "monotone over 5 noise amplitudes");
  return o;
}

// ---- 6-9: toy training ----

KeyValueConfig toy_sim() {
  KeyValueConfig c;
  c.set("synthetic_scenes", "1");
  c.set("width", "32");
  c.set("height", "32");
  c.set("hsi_bands", "8");
  c.set("msi_bands", "3");
  c.set("materials", "3");
  c.set("scale", "4");
  c.set("seed", "7");
  return c;
}

KeyValueConfig toy_train(const fs::path& manifest, int stages, std::int64_t iterations) {
  KeyValueConfig c;
  c.set("manifest", manifest.string());
  c.set("stages", std::to_string(stages));
  c.set("prior_dim", "16");
  c.set("window", "4");
  c.set("heads", "4");
  c.set("lr", "1e-3");
  c.set("batch", "1");
  c.set("iterations", std::to_string(iterations));
  c.set("log_every", "50");
  c.set("seed", "1");
  return c;
}

struct ToyRun {
  TrainSummary train;
  EvalTable eval;
  double seconds = 0.0;
  Index params = 0;
};

ToyRun toy_run(const fs::path& manifest, const fs::path& out, int stages, std::int64_t iterations) {
  ToyRun r;
  const auto t0 = Clock::now();
  r.train = cmd_train(toy_train(manifest, stages, iterations), out / "train");
  r.seconds = seconds_since(t0);
  r.params = load_network<float>(read_checkpoint(out / "train" / "last.ckpt")).count_params();
  KeyValueConfig e;
  e.set("checkpoint", (out / "train" / "last.ckpt").string());
  e.set("manifest", manifest.string());
  e.set("split", "train");
  r.eval = cmd_eval(e, out / "eval");
  return r;
}

double fused_psnr(const ToyRun& r) { return r.eval.find("mean", "fused").metrics.psnr; }
double bicubic_psnr(const ToyRun& r) { return r.eval.find("mean", "bicubic").metrics.psnr; }

Outcome toy_overfit(const ToyRun& r) {
  Outcome o;
  const double first = r.train.first_loss.value_or(NAN), last = r.train.last_loss.value_or(NAN);
  o.require(r.train.steps == 500, std::to_string(r.train.steps) + " Adam steps");
  o.require(last <= 0.1 * first, "L1 " + fmt("%.4f", first) + " -> " + fmt("%.4f", last) + " (ratio " +
                                     fmt("%.3f", last / first) + " <= 0.1)");
  const double gain = fused_psnr(r) - bicubic_psnr(r);
  o.require(gain >= 3.0, "PSNR fused " + fmt("%.2f", fused_psnr(r)) + " vs bicubic " + fmt("%.2f", bicubic_psnr(r)) +
                             " (+" + fmt("%.2f", gain) + " dB >= 3)");
  o.require(r.seconds < 600.0, "training " + fmt("%.1f", r.seconds) + " s < 600 s");
  return o;
}

Outcome stage_axis(const ToyRun& k2, const ToyRun& k1, const fs::path& out) {
  Outcome o;
  std::ostringstream t;
  t << "Influence of the number of stages (toy scene, 500 steps, seed 1)\n";
  t << "K  params  final_L1   PSNR     SAM     ERGAS   SSIM\n";
  for (const auto* r : {&k1, &k2}) {
    const auto& m = r->eval.find("mean", "fused").metrics;
    char line[160];
    std::snprintf(line, sizeof line, "%d  %6ld  %.5f  %7.3f  %6.3f  %6.3f  %.4f\n", r == &k1 ? 1 : 2,
                  static_cast<long>(r->params), r->train.last_loss.value_or(NAN), m.psnr, m.sam, m.ergas,
                  m.ssim);
    t << line;
  }
  const auto& b = k2.eval.find("mean", "bicubic").metrics;
  char line[160];
  std::snprintf(line, sizeof line, "bicubic          %7.3f  %6.3f  %6.3f  %.4f\n", b.psnr, b.sam, b.ergas, b.ssim);
  t << line;
  std::ofstream(out / "stage_table.txt") << t.str();
  std::fputs(t.str().c_str(), stdout);
  o.require(fused_psnr(k2) >= fused_psnr(k1) - 0.2, "K=2 " + fmt("%.2f", fused_psnr(k2)) + " dB vs K=1 " +
                                                        fmt("%.2f", fused_psnr(k1)) + " dB - 0.2");
  return o;
}

Outcome prior_ablation(const fs::path& trained_ckpt, const fs::path& manifest) {
  Outcome o;
  const Checkpoint ck = read_checkpoint(trained_ckpt);
  const FusionNet<float> with3d = load_network<float>(ck);
  FusionConfig c = with3d.config();
  c.n_conv3d = 0;
  FusionNet<float> without3d(c);
  const Index n2 = with3d.count_params(), n0 = without3d.count_params();
  o.require(n2 != n0, "count_params n_conv3d=2: " + std::to_string(n2) + ", n_conv3d=0: " + std::to_string(n0));
  // Same trained weights everywhere except the 3D stack, which is dropped.
  for (const auto& [name, t] : without3d.params().entries()) {
    const auto& src = with3d.params().at(name);
    std::copy(src.data().begin(), src.data().end(), t.data().begin());
  }
  const Manifest m = Manifest::load(manifest);
  const SceneData s = load_scene(m, m.scenes.front());
  const HsiCube a = fuse(with3d, s.msi, s.hsi), b = fuse(without3d, s.msi, s.hsi);
  const double diff = (a.data() - b.data()).cwiseAbs().maxCoeff();
  o.require(diff > 1e-6, "output max-abs difference " + fmt("%.3e", diff) + " > 1e-6");
  FusionConfig k = with3d.config();
  bool same = true;
  for (int stages : {1, 2, 3, 5}) {
    k.stages = stages;
    same = same && count_params(k) == n2;
  }
  o.require(same, "shared count_params identical for K in {1,2,3,5}");
  return o;
}

Outcome reproducibility(const fs::path& run_a, const fs::path& run_b, const fs::path& resumed,
                        const TrainSummary& resumed_summary) {
  Outcome o;
  o.require(bytes(run_a / "train" / "last.ckpt") == bytes(run_b / "train" / "last.ckpt"),
            "repeat run: checkpoint bit-identical");
  o.require(bytes(run_a / "eval" / "eval_metrics.txt") == bytes(run_b / "eval" / "eval_metrics.txt"),
            "metric report bit-identical");
  o.require(resumed_summary.steps == 500 &&
                bytes(run_a / "train" / "last.ckpt") == bytes(resumed / "last.ckpt"),
            "250 + resume to 500 equals uninterrupted checkpoint");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: %s OUTPUT_DIR\n", argv[0]);
    return 2;
  }
  const fs::path out = argv[1];
  fs::remove_all(out);
  fs::create_directories(out);
  std::ofstream report(out / "acceptance_report.txt");
  int failures = 0;
  auto emit = [&](int id, const char* title, const Outcome& o) {
    char line[1024];
    std::snprintf(line, sizeof line, "%s  %d  %s: %s\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.c_str());
    std::fputs(line, stdout);
    std::fflush(stdout);
    report << line;
    report.flush();
    failures += o.pass ? 0 : 1;
  };

  try {
    emit(1, "gradient integrity", gradient_integrity(report));
    emit(2, "adjoint identity", adjoints());
    emit(3, "unfolding-mathematics equivalence", unfolding_equivalence());
    emit(4, "classical-solver oracle", solver_oracle());
    emit(5, "metric oracles", metric_oracles());

    const fs::path data = out / "toy_data";
    cmd_simulate(toy_sim(), data);
    const fs::path manifest = data / "manifest.txt";
    const ToyRun k2 = toy_run(manifest, out / "k2_a", 2, 500);
    emit(6, "toy overfit", toy_overfit(k2));

    const ToyRun k1 = toy_run(manifest, out / "k1", 1, 500);
    emit(7, "stage-count axis", stage_axis(k2, k1, out));

    emit(8, "prior-ablation axis", prior_ablation(out / "k2_a" / "train" / "last.ckpt", manifest));

    toy_run(manifest, out / "k2_b", 2, 500);
    cmd_train(toy_train(manifest, 2, 250), out / "k2_half");
    auto resume = toy_train(manifest, 2, 500);
    resume.set("resume", (out / "k2_half" / "last.ckpt").string());
    const TrainSummary resumed = cmd_train(resume, out / "k2_resumed");
    emit(9, "reproducibility", reproducibility(out / "k2_a", out / "k2_b", out / "k2_resumed", resumed));
  } catch (const std::exception& e) {
    std::printf("FAIL  acceptance aborted: %s\n", e.what());
    return 1;
  }
  std::printf("%s: %d criteria failed\n", failures ? "FAILED" : "ALL PASSED", failures);
  return failures ? 1 : 0;
}
