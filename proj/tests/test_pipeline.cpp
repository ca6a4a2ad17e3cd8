#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "hsf/ops.hpp"
#include "hsf/pipeline.hpp"
#include "hsf/selftest.hpp"

using namespace hsf;

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("hsf_pipe_" + name);
  fs::remove_all(p);
  return p;
}

std::string bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

KeyValueConfig sim_config(int scenes = 2, int hsi_bands = 4) {
  KeyValueConfig c;
  c.set("synthetic_scenes", std::to_string(scenes));
  c.set("width", "16");
  c.set("height", "16");
  c.set("hsi_bands", std::to_string(hsi_bands));
  c.set("msi_bands", "2");
  c.set("materials", "2");
  c.set("scale", "2");
  c.set("kernel_size", "4");
  c.set("kernel_sigma", "1.0");
  c.set("seed", "11");
  return c;
}

KeyValueConfig train_config(const fs::path& manifest, int iterations) {
  KeyValueConfig c;
  c.set("manifest", manifest.string());
  c.set("stages", "2");
  c.set("prior_dim", "4");
  c.set("n_stl", "1");
  c.set("window", "4");
  c.set("heads", "2");
  c.set("n_conv3d", "2");
  c.set("conv3d_channels", "2");
  c.set("batch", "2");
  c.set("patch", "8");
  c.set("lr", "1e-3");
  c.set("iterations", std::to_string(iterations));
  c.set("log_every", "1");
  c.set("seed", "5");
  return c;
}

// One shared simulated dataset for the tests below.
const fs::path& dataset() {
  static const fs::path dir = [] {
    const auto d = fresh_dir("data");
    auto c = sim_config(3);
    c.set("test_scenes", "1");
    cmd_simulate(c, d);
    return d;
  }();
  return dir;
}

}  // namespace

TEST(Simulate, WritesFilesWithExpectedDims) {
  const auto d = dataset();
  for (const char* f : {"manifest.txt", "srf.txt", "kernel.txt", "resolved_config.txt"}) EXPECT_TRUE(fs::exists(d / f)) << f;
  const Manifest m = Manifest::load(d / "manifest.txt");
  ASSERT_EQ(m.scenes.size(), 3u);
  EXPECT_EQ(m.scale(), 2);
  EXPECT_EQ(m.select("train").size(), 2u);
  EXPECT_EQ(m.select("test").size(), 1u);
  EXPECT_EQ(m.select("test").front().id, m.scenes.back().id);
  EXPECT_THROW(m.select("val"), ConfigError);
  const SceneData s = load_scene(m, m.scenes.front());
  EXPECT_EQ(s.truth.width(), 16);
  EXPECT_EQ(s.truth.bands(), 4);
  EXPECT_EQ(s.msi.width(), 16);
  EXPECT_EQ(s.msi.bands(), 2);
  EXPECT_EQ(s.hsi.width(), 8);
  EXPECT_EQ(s.hsi.bands(), 4);
}

TEST(Simulate, RerunIsByteIdentical) {
  const auto a = fresh_dir("sim_a"), b = fresh_dir("sim_b");
  cmd_simulate(sim_config(), a);
  cmd_simulate(sim_config(), b);
  for (const auto& e : fs::directory_iterator(a)) {
    const auto name = e.path().filename();
    EXPECT_EQ(bytes(a / name), bytes(b / name)) << name;
  }
  auto other = sim_config();
  other.set("seed", "12");
  const auto c = fresh_dir("sim_c");
  const auto s = cmd_simulate(other, c);
  EXPECT_NE(bytes(a / s.scenes.front().truth), bytes(c / s.scenes.front().truth));
}

TEST(Simulate, RejectsInvalidResponse) {
  const auto d = fresh_dir("sim_srf");
  fs::create_directories(d);
  std::ofstream(d / "srf.txt") << "0.5 0.5\n0.5 -0.5\n0.0 1.0\n0.0 0.0\n";
  auto c = sim_config();
  c.set("srf", (d / "srf.txt").string());
  EXPECT_THROW(cmd_simulate(c, d / "out"), ConfigError);
}

TEST(Manifest, SaveLoadRoundTrip) {
  const Manifest m = Manifest::load(dataset() / "manifest.txt");
  const auto d = fresh_dir("manifest");
  fs::create_directories(d);
  m.save(d / "m.txt");
  const Manifest r = Manifest::load(d / "m.txt");
  ASSERT_EQ(r.scenes.size(), m.scenes.size());
  EXPECT_EQ(r.scenes[1].msi, m.scenes[1].msi);
  EXPECT_EQ(r.scenes[2].split, "test");
  EXPECT_EQ(r.meta.serialize(), m.meta.serialize());
}

TEST(Train, ZeroIterationsSavesInitialization) {
  const auto out = fresh_dir("train0");
  const auto sum = cmd_train(train_config(dataset() / "manifest.txt", 0), out);
  EXPECT_EQ(sum.steps, 0);
  const Checkpoint ck = read_checkpoint(out / "last.ckpt");
  KeyValueConfig arch;
  for (const auto& [k, v] : ck.config.items())
    if (FusionConfig::keys().count(k)) arch.set(k, v);
  const FusionNet<float> fresh(FusionConfig::from_config(arch));
  for (const auto& [name, t] : fresh.params().entries()) {
    const TensorRecord* r = ck.find(name);
    ASSERT_NE(r, nullptr) << name;
    ASSERT_EQ(r->data.size(), t.data().size());
    for (std::size_t i = 0; i < r->data.size(); ++i) ASSERT_EQ(r->data[i], t.data()[i]) << name;
  }
  EXPECT_EQ(arch.get_int("hsi_bands", 0), 4);
  EXPECT_EQ(arch.get_int("msi_bands", 0), 2);
  EXPECT_EQ(arch.get_int("scale", 0), 2);
}

TEST(Train, LossDecreasesAndLogIsWritten) {
  const auto out = fresh_dir("train_log");
  const auto sum = cmd_train(train_config(dataset() / "manifest.txt", 30), out);
  ASSERT_TRUE(sum.first_loss && sum.last_loss);
  EXPECT_LT(*sum.last_loss, *sum.first_loss);
  std::ifstream log(out / "loss.log");
  int lines = 0;
  for (std::string l; std::getline(log, l);) ++lines;
  EXPECT_EQ(lines, 30);
  EXPECT_TRUE(fs::exists(out / "best.ckpt"));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto manifest = dataset() / "manifest.txt";
  const auto full = fresh_dir("resume_full"), half = fresh_dir("resume_half"), rest = fresh_dir("resume_rest");
  cmd_train(train_config(manifest, 20), full);
  cmd_train(train_config(manifest, 10), half);
  auto cont = train_config(manifest, 20);
  cont.set("resume", (half / "last.ckpt").string());
  const auto sum = cmd_train(cont, rest);
  EXPECT_EQ(sum.steps, 20);
  EXPECT_EQ(bytes(full / "last.ckpt"), bytes(rest / "last.ckpt"));
}

TEST(Train, ExplicitShapeMismatchIsConfigError) {
  auto c = train_config(dataset() / "manifest.txt", 0);
  c.set("hsi_bands", "5");
  EXPECT_THROW(cmd_train(c, fresh_dir("train_bad")), ConfigError);
  auto p = train_config(dataset() / "manifest.txt", 1);
  p.set("patch", "3");
  EXPECT_THROW(cmd_train(p, fresh_dir("train_bad_patch")), ConfigError);
}

TEST(Eval, MeanRowsAndFuseAgree) {
  const auto tr = fresh_dir("eval_train");
  cmd_train(train_config(dataset() / "manifest.txt", 5), tr);
  KeyValueConfig e;
  e.set("checkpoint", (tr / "last.ckpt").string());
  e.set("manifest", (dataset() / "manifest.txt").string());
  e.set("split", "all");
  const auto out = fresh_dir("eval");
  const EvalTable t = cmd_eval(e, out);
  EXPECT_TRUE(fs::exists(out / "eval.txt"));
  EXPECT_EQ(bytes(out / "eval_metrics.txt"), t.machine());
  const Manifest m = Manifest::load(dataset() / "manifest.txt");
  double mean = 0.0;
  for (const auto& s : m.scenes) mean += t.find(s.id, "fused").metrics.psnr;
  EXPECT_NEAR(t.find("mean", "fused").metrics.psnr, mean / 3.0, 1e-12);

  const auto& rec = m.scenes.front();
  KeyValueConfig f;
  f.set("checkpoint", (tr / "last.ckpt").string());
  f.set("msi", m.resolve(rec.msi).string());
  f.set("hsi", m.resolve(rec.hsi).string());
  f.set("dump_bands", "true");
  const auto fo = fresh_dir("fuse");
  const HsiCube x = cmd_fuse(f, fo);
  EXPECT_TRUE(fs::exists(fo / "fused.hsc"));
  EXPECT_TRUE(fs::exists(fo / "fused_band003.pgm"));
  const SceneData s = load_scene(m, rec);
  EXPECT_EQ(psnr(x, s.truth), t.find(rec.id, "fused").metrics.psnr);
}

TEST(Eval, ShapeMismatchIsConfigError) {
  const auto tr = fresh_dir("eval_mismatch_train");
  cmd_train(train_config(dataset() / "manifest.txt", 0), tr);
  const auto other = fresh_dir("eval_mismatch_data");
  cmd_simulate(sim_config(1, 6), other);
  KeyValueConfig e;
  e.set("checkpoint", (tr / "last.ckpt").string());
  e.set("manifest", (other / "manifest.txt").string());
  e.set("split", "all");
  EXPECT_THROW(cmd_eval(e, fresh_dir("eval_mismatch")), ConfigError);
}

TEST(Baseline, TraceMonotoneAndBeatsBicubic) {
  KeyValueConfig c;
  c.set("manifest", (dataset() / "manifest.txt").string());
  c.set("split", "all");
  c.set("max_iters", "300");
  const auto out = fresh_dir("baseline");
  const EvalTable t = cmd_baseline(c, out);
  const Manifest m = Manifest::load(dataset() / "manifest.txt");
  for (const auto& s : m.scenes) {
    std::ifstream is(out / ("trace_" + s.id + ".txt"));
    std::string header;
    std::getline(is, header);
    double prev = 0.0, f = 0.0, first = 0.0;
    long i = 0, n = 0;
    while (is >> i >> f) {
      if (n == 0) first = f;
      if (n > 0) EXPECT_LE(f, prev + 1e-12 * first) << s.id << " iteration " << i;
      prev = f;
      ++n;
    }
    EXPECT_GT(n, 1);
    EXPECT_TRUE(fs::exists(out / ("baseline_" + s.id + ".hsc")));
  }
  EXPECT_GT(t.find("mean", "baseline").metrics.psnr, t.find("mean", "bicubic").metrics.psnr);
}

TEST(Config, UnknownKeysAreRejected) {
  KeyValueConfig c = train_config("m.txt", 1);
  EXPECT_NO_THROW(c.require_known(known_config_keys()));
  c.set("stagez", "3");
  EXPECT_THROW(c.require_known(known_config_keys()), ConfigError);
  EXPECT_THROW(KeyValueConfig::parse("a=1\na=2\n"), ConfigError);
}

TEST(Checkpoint, RoundTripAndCorruption) {
  FusionConfig fc;
  fc.stages = 1, fc.scale = 2, fc.hsi_bands = 3, fc.msi_bands = 2, fc.prior_dim = 4, fc.heads = 1, fc.window = 4;
  fc.n_stl = 1, fc.n_conv3d = 1;
  const FusionNet<float> net(fc);
  const Checkpoint ck = make_checkpoint(net);
  const auto d = fresh_dir("ckpt");
  fs::create_directories(d);
  write_checkpoint(d / "a.ckpt", ck);
  const Checkpoint r = read_checkpoint(d / "a.ckpt");
  EXPECT_EQ(r.config.serialize(), ck.config.serialize());
  ASSERT_EQ(r.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < r.tensors.size(); ++i) {
    EXPECT_EQ(r.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(r.tensors[i].shape, ck.tensors[i].shape);
    EXPECT_EQ(r.tensors[i].data, ck.tensors[i].data);
  }
  const FusionNet<float> back = load_network<float>(r);
  EXPECT_EQ(back.count_params(), net.count_params());

  const std::string raw = bytes(d / "a.ckpt");
  std::ofstream(d / "trunc.ckpt", std::ios::binary) << raw.substr(0, raw.size() - 7);
  EXPECT_THROW(read_checkpoint(d / "trunc.ckpt"), IOError);
  std::ofstream(d / "tail.ckpt", std::ios::binary) << raw << "x";
  EXPECT_THROW(read_checkpoint(d / "tail.ckpt"), IOError);
  std::ofstream(d / "magic.ckpt", std::ios::binary) << "XXXX" << raw.substr(4);
  EXPECT_THROW(read_checkpoint(d / "magic.ckpt"), IOError);

  FusionConfig wider = fc;
  wider.prior_dim = 8;
  FusionNet<float> other(wider);
  EXPECT_THROW(load_parameters(other, ck), ConfigError);
}

TEST(Selftest, ConvFaultFailsExactlyTheConvChecks) {
  SelftestOptions o;
  o.gradchecks_only = true;
  hsf::testing::set_conv2d_backward_fault(true);
  const SelftestReport faulty = run_selftest(o);
  hsf::testing::set_conv2d_backward_fault(false);
  int conv_checks = 0;
  for (const auto& c : faulty.checks) {
    EXPECT_EQ(c.passed, !c.uses_conv2d) << c.name;
    conv_checks += c.uses_conv2d;
  }
  EXPECT_GT(conv_checks, 0);
  EXPECT_TRUE(run_selftest(o).passed());
}
