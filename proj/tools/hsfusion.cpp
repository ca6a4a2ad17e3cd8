#include <CLI11.hpp>

#include <iostream>

#include "hsf/errors.hpp"
#include "hsf/pipeline.hpp"
#include "hsf/selftest.hpp"

namespace {

struct GlobalOptions {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string precision;
  std::vector<std::string> overrides;
};

hsf::KeyValueConfig merged_config(const GlobalOptions& g) {
  hsf::KeyValueConfig cfg = g.config.empty() ? hsf::KeyValueConfig{} : hsf::KeyValueConfig::load(g.config);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw hsf::ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) cfg.set("seed", std::to_string(*g.seed));
  if (!g.precision.empty()) cfg.set("precision", g.precision);
  cfg.require_known(hsf::known_config_keys());
  return cfg;
}

int run_selftest(bool gradchecks_only, bool inject_fault, std::uint64_t seed) {
  hsf::testing::set_conv2d_backward_fault(inject_fault);
  const auto report = hsf::run_selftest({gradchecks_only, seed});
  std::cout << report.format();
  std::cout << (report.passed() ? "selftest: all checks passed\n" : "selftest: FAILED\n");
  return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperspectral / multispectral image fusion with a deep unfolding network"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  app.add_option("--config", g.config, "key=value configuration file")->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output directory");
  app.add_option("--seed", g.seed, "random seed (overrides the config)");
  app.add_option("--precision", g.precision, "single or double")->check(CLI::IsMember({"single", "double"}));
  app.add_option("--set", g.overrides, "extra key=value overrides, repeatable");

  auto* simulate = app.add_subcommand("simulate", "degrade truth cubes into (HR-MSI, LR-HSI) pairs + manifest");
  auto* train = app.add_subcommand("train", "train the network on a manifest's train split");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest split");
  auto* fuse = app.add_subcommand("fuse", "fuse one (msi, hsi) pair with a checkpoint");
  auto* baseline = app.add_subcommand("baseline", "classical proximal-gradient fusion");
  auto* selftest = app.add_subcommand("selftest", "gradient checks, adjoints, oracles, metric identities");
  auto* gradcheck = app.add_subcommand("gradcheck", "gradient checks only");
  bool inject_fault = false;
  for (auto* sub : {selftest, gradcheck})
    sub->add_flag("--inject-conv2d-fault", inject_fault, "perturb conv2d's weight gradient (test hook)");

  CLI11_PARSE(app, argc, argv);

  try {
    const hsf::KeyValueConfig cfg = merged_config(g);
    const std::filesystem::path out = g.out;
    if (simulate->parsed()) {
      const auto s = hsf::cmd_simulate(cfg, out);
      std::cout << "wrote " << s.scenes.size() << " scenes and manifest.txt to " << out.string() << "\n";
    } else if (train->parsed()) {
      const auto s = hsf::cmd_train(cfg, out, &std::cout);
      if (s.first_loss) std::cout << "first loss " << *s.first_loss << "\n";
    } else if (eval->parsed()) {
      std::cout << hsf::cmd_eval(cfg, out).aligned();
    } else if (fuse->parsed()) {
      const auto x = hsf::cmd_fuse(cfg, out);
      std::cout << "wrote " << (out / "fused.hsc").string() << " (" << x.width() << "x" << x.height() << "x"
                << x.bands() << ")\n";
    } else if (baseline->parsed()) {
      std::cout << hsf::cmd_baseline(cfg, out).aligned();
    } else if (selftest->parsed() || gradcheck->parsed()) {
      return run_selftest(gradcheck->parsed(), inject_fault, cfg.get_u64("seed", 0));
    }
  } catch (const hsf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
