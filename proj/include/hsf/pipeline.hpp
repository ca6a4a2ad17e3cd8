#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hsf/checkpoint.hpp"
#include "hsf/config.hpp"
#include "hsf/metrics.hpp"
#include "hsf/net.hpp"
#include "hsf/optim.hpp"

namespace hsf {

namespace fs = std::filesystem;

// ---- dataset manifest ----

struct SceneRecord {
  std::string id;
  std::string truth;  // paths relative to the manifest directory
  std::string msi;
  std::string hsi;
  std::string split;  // "train" or "test"
};

/// Text manifest: "# key=value" header lines carry metadata (scale, srf,
/// kernel); every other non-comment line is "id truth msi hsi split".
struct Manifest {
  fs::path dir;
  KeyValueConfig meta;
  std::vector<SceneRecord> scenes;

  static Manifest load(const fs::path& path);
  void save(const fs::path& path) const;
  std::vector<SceneRecord> select(const std::string& split) const;  // "all" selects everything
  fs::path resolve(const std::string& rel) const { return dir / rel; }
  Index scale() const;
};

struct SceneData {
  std::string id;
  HsiCube truth;
  HsiCube msi;
  HsiCube hsi;
};

SceneData load_scene(const Manifest& m, const SceneRecord& r);

// ---- training ----

struct TrainOptions {
  AdamOptions adam;
  int batch = 8;
  std::int64_t iterations = 0;
  Index patch = 0;  // HR patch edge; 0 trains on whole scenes
  std::int64_t log_every = 10;
  std::int64_t eval_every = 0;
  std::int64_t checkpoint_every = 0;
  std::uint64_t seed = 0;

  static TrainOptions from_config(const KeyValueConfig& kv);
  void write_to(KeyValueConfig& kv) const;
};

/// Owns network, optimizer and sampler state. Sampling is uniform with
/// replacement over (scene, patch position).
template <typename T>
class Trainer {
 public:
  Trainer(const FusionConfig& cfg, const TrainOptions& opts, std::vector<SceneData> train,
          std::vector<SceneData> eval = {});

  /// One optimizer step on a freshly sampled batch; returns the batch loss
  /// measured before the update.
  double step();

  /// Steps until step_count() == target, logging "step\tloss\tlr" lines.
  void run_until(std::int64_t target, std::ostream* log = nullptr,
                 const fs::path& checkpoint_dir = {});

  std::int64_t step_count() const { return step_; }
  std::optional<double> first_loss() const { return first_loss_; }
  std::optional<double> last_loss() const { return last_loss_; }
  double best_eval_psnr() const { return best_psnr_; }

  /// Mean PSNR of the network output over the eval scenes.
  double evaluate() const;

  FusionNet<T>& net() { return net_; }
  const FusionNet<T>& net() const { return net_; }

  /// Parameters, Adam moments and sampler state.
  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ck);

 private:
  struct Sample {
    DiffTensor<T> msi, hsi, truth;
  };
  Sample draw();
  Sample whole(const SceneData& s) const;

  FusionConfig cfg_;
  TrainOptions opts_;
  std::vector<SceneData> train_;
  std::vector<SceneData> eval_;
  FusionNet<T> net_;
  Adam<T> adam_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::optional<double> first_loss_, last_loss_;
  double best_psnr_ = -1.0;
  std::int64_t best_step_ = -1;
};

// ---- evaluation ----

struct EvalRow {
  std::string scene;
  std::string method;
  MetricsReport metrics;
};

struct EvalTable {
  std::vector<EvalRow> rows;  // scene rows followed by "mean" rows per method

  const EvalRow& find(const std::string& scene, const std::string& method) const;
  std::string aligned() const;
  std::string machine() const;
};

/// Network output for one scene, evaluated in the network's precision.
template <typename T>
HsiCube fuse(const FusionNet<T>& net, const HsiCube& msi, const HsiCube& hsi);

// ---- commands ----
// Each takes the merged configuration (file + command-line overrides) and an
// output directory, writes its artifacts plus resolved_config.txt there, and
// returns a summary for programmatic callers.

/// Every key any command understands.
const std::set<std::string>& known_config_keys();

struct SimulateSummary {
  std::vector<SceneRecord> scenes;
};
SimulateSummary cmd_simulate(const KeyValueConfig& cfg, const fs::path& out);

struct TrainSummary {
  std::int64_t steps = 0;
  std::optional<double> first_loss;
  std::optional<double> last_loss;
  double best_eval_psnr = -1.0;
};
TrainSummary cmd_train(const KeyValueConfig& cfg, const fs::path& out, std::ostream* progress = nullptr);

EvalTable cmd_eval(const KeyValueConfig& cfg, const fs::path& out);

HsiCube cmd_fuse(const KeyValueConfig& cfg, const fs::path& out);

EvalTable cmd_baseline(const KeyValueConfig& cfg, const fs::path& out);

}  // namespace hsf
