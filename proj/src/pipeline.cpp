#include "hsf/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "hsf/solver.hpp"

namespace hsf {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  for (std::string tok; is >> tok;) out.push_back(tok);
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

HsiCube crop(const HsiCube& x, Index r0, Index c0, Index h, Index w) {
  HsiCube out(w, h, x.bands());
  for (Index b = 0; b < x.bands(); ++b) out.band(b) = x.band(b).block(r0, c0, h, w);
  return out;
}

void prepare_out(const fs::path& out) {
  if (out.empty()) throw ConfigError("an output directory is required (--out)");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IOError("cannot create output directory " + out.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IOError("cannot write " + path.string());
  os << text;
}

/// Architecture config for a dataset: band counts and scale come from the
/// data unless set explicitly, in which case they must agree.
FusionConfig resolve_architecture(const KeyValueConfig& cfg, const Manifest& m, const SceneData& first) {
  KeyValueConfig arch;
  for (const auto& [k, v] : cfg.items())
    if (FusionConfig::keys().count(k)) arch.set(k, v);
  const auto fill = [&](const std::string& key, Index actual) {
    if (!arch.has(key)) {
      arch.set(key, std::to_string(actual));
    } else if (arch.get_int(key, 0) != actual) {
      throw ConfigError("config " + key + "=" + arch.get(key) + " but the data has " + std::to_string(actual));
    }
  };
  fill("hsi_bands", first.truth.bands());
  fill("msi_bands", first.msi.bands());
  fill("scale", m.scale());
  return FusionConfig::from_config(arch);
}

void check_scene_against(const FusionConfig& c, const SceneData& s) {
  if (s.truth.bands() != c.hsi_bands || s.hsi.bands() != c.hsi_bands || s.msi.bands() != c.msi_bands)
    throw ConfigError("scene '" + s.id + "' band counts do not match the network (S=" +
                      std::to_string(c.hsi_bands) + ", s=" + std::to_string(c.msi_bands) + ")");
  if (s.hsi.width() * c.scale != s.msi.width() || s.hsi.height() * c.scale != s.msi.height())
    throw ConfigError("scene '" + s.id + "' grids do not match the network scale " + std::to_string(c.scale));
}

Precision precision_of(const KeyValueConfig& cfg) {
  return parse_precision(cfg.get_or("precision", "single"));
}

}  // namespace

// ---- manifest ----

Manifest Manifest::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IOError("cannot open manifest " + path.string());
  Manifest m;
  m.dir = path.parent_path();
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind('#', 0) == 0) {
      const std::string body = line.substr(1);
      const auto eq = body.find('=');
      if (eq != std::string::npos) {
        const auto toks = split_ws(body.substr(0, eq));
        if (toks.size() == 1) m.meta.set(toks[0], split_ws(body.substr(eq + 1)).empty() ? "" : split_ws(body.substr(eq + 1))[0]);
      }
      continue;
    }
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 5)
      throw IOError("manifest line " + std::to_string(n) + ": expected 'id truth msi hsi split'");
    if (toks[4] != "train" && toks[4] != "test")
      throw IOError("manifest line " + std::to_string(n) + ": split must be train or test");
    m.scenes.push_back({toks[0], toks[1], toks[2], toks[3], toks[4]});
  }
  return m;
}

void Manifest::save(const fs::path& path) const {
  std::ostringstream os;
  os << "# hsfusion dataset manifest\n";
  for (const auto& [k, v] : meta.items()) os << "# " << k << "=" << v << "\n";
  os << "# id truth msi hsi split\n";
  for (const auto& s : scenes)
    os << s.id << ' ' << s.truth << ' ' << s.msi << ' ' << s.hsi << ' ' << s.split << '\n';
  write_text(path, os.str());
}

std::vector<SceneRecord> Manifest::select(const std::string& split) const {
  if (split != "train" && split != "test" && split != "all")
    throw ConfigError("split must be train, test or all");
  std::vector<SceneRecord> out;
  for (const auto& s : scenes)
    if (split == "all" || s.split == split) out.push_back(s);
  return out;
}

Index Manifest::scale() const {
  const auto d = meta.get_int("scale", 0);
  if (d < 1) throw ConfigError("manifest lacks a '# scale=' header");
  return d;
}

SceneData load_scene(const Manifest& m, const SceneRecord& r) {
  SceneData s{r.id, read_hsc(m.resolve(r.truth)), read_hsc(m.resolve(r.msi)), read_hsc(m.resolve(r.hsi))};
  const Index d = m.scale();
  if (s.msi.width() != s.truth.width() || s.msi.height() != s.truth.height())
    throw ShapeError("scene '" + r.id + "': MSI and truth grids differ");
  if (s.hsi.bands() != s.truth.bands())
    throw ShapeError("scene '" + r.id + "': HSI and truth band counts differ");
  if (s.hsi.width() * d != s.truth.width() || s.hsi.height() * d != s.truth.height())
    throw ShapeError("scene '" + r.id + "': HSI grid times scale does not match truth");
  return s;
}

// ---- training ----

TrainOptions TrainOptions::from_config(const KeyValueConfig& kv) {
  TrainOptions o;
  o.adam.lr = kv.get_double("lr", o.adam.lr);
  o.adam.beta1 = kv.get_double("beta1", o.adam.beta1);
  o.adam.beta2 = kv.get_double("beta2", o.adam.beta2);
  o.adam.eps = kv.get_double("eps", o.adam.eps);
  o.batch = static_cast<int>(kv.get_int("batch", o.batch));
  o.iterations = kv.get_int("iterations", o.iterations);
  o.patch = kv.get_int("patch", o.patch);
  o.log_every = kv.get_int("log_every", o.log_every);
  o.eval_every = kv.get_int("eval_every", o.eval_every);
  o.checkpoint_every = kv.get_int("checkpoint_every", o.checkpoint_every);
  o.seed = kv.get_u64("seed", o.seed);
  if (o.batch < 1) throw ConfigError("batch must be positive");
  if (o.iterations < 0) throw ConfigError("iterations must be non-negative");
  if (o.patch < 0) throw ConfigError("patch must be non-negative");
  if (!(o.adam.lr > 0.0)) throw ConfigError("lr must be positive");
  return o;
}

void TrainOptions::write_to(KeyValueConfig& kv) const {
  kv.set("lr", format_double(adam.lr));
  kv.set("beta1", format_double(adam.beta1));
  kv.set("beta2", format_double(adam.beta2));
  kv.set("eps", format_double(adam.eps));
  kv.set("batch", std::to_string(batch));
  kv.set("iterations", std::to_string(iterations));
  kv.set("patch", std::to_string(patch));
  kv.set("log_every", std::to_string(log_every));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("seed", std::to_string(seed));
}

template <typename T>
Trainer<T>::Trainer(const FusionConfig& cfg, const TrainOptions& opts, std::vector<SceneData> train,
                    std::vector<SceneData> eval)
    : cfg_(cfg),
      opts_(opts),
      train_(std::move(train)),
      eval_(std::move(eval)),
      net_(cfg),
      adam_(net_.params().tensors(), opts.adam),
      rng_(Rng(opts.seed).split(1)) {
  if (train_.empty()) throw ConfigError("no training scenes");
  for (const auto& s : train_) check_scene_against(cfg_, s);
  for (const auto& s : eval_) check_scene_against(cfg_, s);
  if (opts_.patch > 0) {
    if (opts_.patch % cfg_.scale != 0) throw ConfigError("patch must be a multiple of scale");
    for (const auto& s : train_)
      if (opts_.patch > s.truth.width() || opts_.patch > s.truth.height())
        throw ConfigError("patch exceeds scene '" + s.id + "'");
  }
}

template <typename T>
typename Trainer<T>::Sample Trainer<T>::whole(const SceneData& s) const {
  return {to_tensor<T>(s.msi), to_tensor<T>(s.hsi), to_tensor<T>(s.truth)};
}

template <typename T>
typename Trainer<T>::Sample Trainer<T>::draw() {
  const SceneData& s = train_[rng_.below(train_.size())];
  if (opts_.patch == 0) return whole(s);
  const Index d = cfg_.scale, p = opts_.patch;
  const Index r0 = static_cast<Index>(rng_.below(static_cast<std::uint64_t>((s.truth.height() - p) / d + 1))) * d;
  const Index c0 = static_cast<Index>(rng_.below(static_cast<std::uint64_t>((s.truth.width() - p) / d + 1))) * d;
  return {to_tensor<T>(crop(s.msi, r0, c0, p, p)), to_tensor<T>(crop(s.hsi, r0 / d, c0 / d, p / d, p / d)),
          to_tensor<T>(crop(s.truth, r0, c0, p, p))};
}

template <typename T>
double Trainer<T>::step() {
  net_.params().zero_grad();
  double loss_value = 0.0;
  {
    Tape<T> tape;
    DiffTensor<T> loss;
    try {
      for (int b = 0; b < opts_.batch; ++b) {
        const Sample s = draw();
        const DiffTensor<T> l = l1(sub(net_.forward(s.msi, s.hsi), s.truth));
        loss = loss.defined() ? add(loss, l) : l;
      }
    } catch (const NumericsError& e) {
      throw NumericsError("training step " + std::to_string(step_) + ": " + e.what());
    }
    if (opts_.batch > 1) loss = scale(loss, T(1) / static_cast<T>(opts_.batch));
    loss_value = static_cast<double>(loss.item());
    if (!std::isfinite(loss_value))
      throw NumericsError("non-finite loss at training step " + std::to_string(step_));
    tape.backward(loss);
  }
  adam_.step();
  if (!first_loss_) first_loss_ = loss_value;
  last_loss_ = loss_value;
  ++step_;
  return loss_value;
}

template <typename T>
double Trainer<T>::evaluate() const {
  if (eval_.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : eval_) total += psnr(fuse(net_, s.msi, s.hsi), s.truth);
  return total / static_cast<double>(eval_.size());
}

template <typename T>
void Trainer<T>::run_until(std::int64_t target, std::ostream* log, const fs::path& checkpoint_dir) {
  while (step_ < target) {
    const double loss = step();
    if (log && opts_.log_every > 0 && (step_ % opts_.log_every == 0 || step_ == 1 || step_ == target)) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g\n", static_cast<long long>(step_), loss,
                    adam_.options().lr);
      *log << buf << std::flush;
    }
    if (opts_.eval_every > 0 && !eval_.empty() && step_ % opts_.eval_every == 0) {
      const double p = evaluate();
      if (p > best_psnr_) {
        best_psnr_ = p;
        best_step_ = step_;
        if (!checkpoint_dir.empty()) write_checkpoint(checkpoint_dir / "best.ckpt", make_checkpoint(net_));
      }
    }
    if (opts_.checkpoint_every > 0 && !checkpoint_dir.empty() && step_ % opts_.checkpoint_every == 0)
      write_checkpoint(checkpoint_dir / "last.ckpt", checkpoint());
  }
}

template <typename T>
Checkpoint Trainer<T>::checkpoint() const {
  Checkpoint ck = make_checkpoint(net_);
  ck.config.set("train.step", std::to_string(step_));
  ck.config.set("train.adam_steps", std::to_string(adam_.steps_taken()));
  ck.config.set("train.rng_key", std::to_string(rng_.key()));
  ck.config.set("train.rng_counter", std::to_string(rng_.counter()));
  ck.config.set("train.best_psnr", format_double(best_psnr_));
  ck.config.set("train.best_step", std::to_string(best_step_));
  if (first_loss_) ck.config.set("train.first_loss", format_double(*first_loss_));
  auto& self = const_cast<Adam<T>&>(adam_);
  const auto& entries = net_.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ck.tensors.push_back(make_record<T>("adam.m/" + entries[i].first, entries[i].second.shape(),
                                        self.first_moments()[i]));
    ck.tensors.push_back(make_record<T>("adam.v/" + entries[i].first, entries[i].second.shape(),
                                        self.second_moments()[i]));
  }
  return ck;
}

template <typename T>
void Trainer<T>::restore(const Checkpoint& ck) {
  for (const auto& key : FusionConfig::keys()) {
    KeyValueConfig mine;
    cfg_.write_to(mine);
    if (key != "seed" && ck.config.has(key) && ck.config.get(key) != mine.get(key))
      throw ConfigError("resume checkpoint has " + key + "=" + ck.config.get(key) + ", run has " +
                        mine.get(key));
  }
  load_parameters(net_, ck);
  step_ = ck.config.get_int("train.step", 0);
  adam_.set_steps_taken(ck.config.get_int("train.adam_steps", 0));
  rng_ = Rng::from_state(ck.config.get_u64("train.rng_key", 0), ck.config.get_u64("train.rng_counter", 0));
  best_psnr_ = ck.config.get_double("train.best_psnr", -1.0);
  best_step_ = ck.config.get_int("train.best_step", -1);
  if (ck.config.has("train.first_loss")) first_loss_ = ck.config.get_double("train.first_loss", 0.0);
  const auto& entries = net_.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    for (const auto& [prefix, moments] :
         {std::pair{"adam.m/", &adam_.first_moments()}, std::pair{"adam.v/", &adam_.second_moments()}}) {
      const TensorRecord* r = ck.find(prefix + entries[i].first);
      auto& dst = (*moments)[i];
      if (!r) {
        if (step_ > 0) throw ConfigError("resume checkpoint lacks optimizer state for " + entries[i].first);
        continue;
      }
      if (r->data.size() != dst.size()) throw ConfigError("optimizer state size mismatch for " + entries[i].first);
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(r->data[j]);
    }
  }
}

// ---- evaluation ----

template <typename T>
HsiCube fuse(const FusionNet<T>& net, const HsiCube& msi, const HsiCube& hsi) {
  NoGradGuard<T> guard;
  return to_cube(net.forward(to_tensor<T>(msi), to_tensor<T>(hsi)));
}

const EvalRow& EvalTable::find(const std::string& scene, const std::string& method) const {
  for (const auto& r : rows)
    if (r.scene == scene && r.method == method) return r;
  throw ConfigError("no eval row for " + scene + "/" + method);
}

std::string EvalTable::aligned() const {
  std::size_t w = 5;
  for (const auto& r : rows) w = std::max(w, r.scene.size());
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %-8s  %9s  %8s  %8s  %7s\n", static_cast<int>(w), "scene", "method",
                "PSNR", "SAM", "ERGAS", "SSIM");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %-8s  %9.4f  %8.4f  %8.4f  %7.4f\n", static_cast<int>(w),
                  r.scene.c_str(), r.method.c_str(), r.metrics.psnr, r.metrics.sam, r.metrics.ergas,
                  r.metrics.ssim);
    out += buf;
  }
  return out;
}

std::string EvalTable::machine() const {
  std::string out;
  for (const auto& r : rows) {
    std::istringstream lines(format_report_exact(r.metrics));
    for (std::string l; std::getline(lines, l);) out += r.scene + "." + r.method + "." + l + "\n";
  }
  return out;
}

namespace {

void append_means(EvalTable& t, const std::vector<std::string>& methods) {
  for (const auto& method : methods) {
    MetricsReport m;
    int n = 0;
    for (const auto& r : t.rows)
      if (r.method == method) {
        m.psnr += r.metrics.psnr, m.sam += r.metrics.sam, m.ergas += r.metrics.ergas, m.ssim += r.metrics.ssim;
        ++n;
      }
    if (n == 0) continue;
    m.psnr /= n, m.sam /= n, m.ergas /= n, m.ssim /= n;
    t.rows.push_back({"mean", method, m});
  }
}

template <typename T>
EvalTable eval_impl(const Checkpoint& ck, const Manifest& m, const std::vector<SceneRecord>& scenes) {
  const FusionNet<T> net = load_network<T>(ck);
  EvalTable t;
  for (const auto& rec : scenes) {
    const SceneData s = load_scene(m, rec);
    check_scene_against(net.config(), s);
    const double d = static_cast<double>(net.config().scale);
    t.rows.push_back({s.id, "fused", evaluate(fuse(net, s.msi, s.hsi), s.truth, d)});
    t.rows.push_back(
        {s.id, "bicubic", evaluate(bicubic_resize_to(s.hsi, s.truth.width(), s.truth.height()), s.truth, d)});
  }
  append_means(t, {"fused", "bicubic"});
  return t;
}

template <typename T>
TrainSummary train_impl(const KeyValueConfig& cfg, const fs::path& out, std::ostream* progress) {
  const Manifest m = Manifest::load(cfg.get("manifest"));
  std::vector<SceneData> train, eval;
  for (const auto& r : m.select("train")) train.push_back(load_scene(m, r));
  for (const auto& r : m.select("test")) eval.push_back(load_scene(m, r));
  if (train.empty()) throw ConfigError("manifest has no train scenes");
  const FusionConfig arch = resolve_architecture(cfg, m, train.front());
  const TrainOptions opts = TrainOptions::from_config(cfg);

  KeyValueConfig resolved = cfg;
  arch.write_to(resolved);
  opts.write_to(resolved);
  resolved.save(out / "resolved_config.txt");

  Trainer<T> trainer(arch, opts, std::move(train), std::move(eval));
  const bool resuming = cfg.has("resume");
  if (resuming) trainer.restore(read_checkpoint(cfg.get("resume")));
  std::ofstream log(out / "loss.log", resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw IOError("cannot write " + (out / "loss.log").string());
  trainer.run_until(opts.iterations, &log, out);
  write_checkpoint(out / "last.ckpt", trainer.checkpoint());
  if (trainer.best_eval_psnr() < 0.0) write_checkpoint(out / "best.ckpt", make_checkpoint(trainer.net()));
  if (progress && trainer.last_loss())
    *progress << "trained to step " << trainer.step_count() << ", loss " << *trainer.last_loss() << "\n";
  return {trainer.step_count(), trainer.first_loss(), trainer.last_loss(), trainer.best_eval_psnr()};
}

}  // namespace

// ---- commands ----

const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k = FusionConfig::keys();
    for (const char* extra :
         {"manifest", "checkpoint", "resume", "split", "lr", "beta1", "beta2", "eps", "batch", "iterations",
          "patch", "log_every", "eval_every", "checkpoint_every", "msi", "hsi", "dump_bands", "prior",
          "lambda", "eta", "max_iters", "rel_tol", "power_iters", "input", "synthetic_scenes", "width",
          "height", "materials", "srf", "kernel_size", "kernel_sigma", "test_scenes"})
      k.insert(extra);
    return k;
  }();
  return keys;
}

SimulateSummary cmd_simulate(const KeyValueConfig& cfg, const fs::path& out) {
  prepare_out(out);
  const Index d = cfg.get_int("scale", 8);
  if (d < 1) throw ConfigError("scale must be positive");
  const std::uint64_t seed = cfg.get_u64("seed", 0);

  std::vector<std::pair<std::string, HsiCube>> truths;
  if (cfg.has("input")) {
    for (const auto& p : split_list(cfg.get("input"))) {
      if (!fs::exists(p)) throw IOError("missing input cube " + p);
      truths.emplace_back(fs::path(p).stem().string(), normalize_peak(read_hsc(p)));
    }
  } else {
    const auto n = cfg.get_int("synthetic_scenes", 1);
    const Index w = cfg.get_int("width", 32), h = cfg.get_int("height", 32);
    const Index S = cfg.get_int("hsi_bands", 8), mats = cfg.get_int("materials", 3);
    Rng rng(seed);
    for (std::int64_t i = 0; i < n; ++i)
      truths.emplace_back("scene" + std::to_string(i), synthetic_scene(w, h, S, mats, rng.next_u64()));
  }
  if (truths.empty()) throw ConfigError("simulate: no input scenes");
  const Index S = truths.front().second.bands();
  const Index s = cfg.get_int("msi_bands", 3);

  const SpectralResponse<double> R =
      cfg.has("srf") ? load_spectral_response(cfg.get("srf")) : synthetic_response(S, s);
  R.validate();
  if (R.hsi_bands() != S) throw ShapeError("spectral response rows do not match the cube band count");
  const SpatialDegradation<double> C{gaussian_kernel(cfg.get_int("kernel_size", 8), cfg.get_double("kernel_sigma", 2.0)), d};
  save_matrix_text(out / "srf.txt", R.matrix);
  save_matrix_text(out / "kernel.txt", C.kernel);

  Manifest m;
  m.dir = out;
  m.meta.set("scale", std::to_string(d));
  m.meta.set("srf", "srf.txt");
  m.meta.set("kernel", "kernel.txt");
  const auto n_test = static_cast<std::size_t>(cfg.get_int("test_scenes", 0));
  if (n_test > truths.size()) throw ConfigError("test_scenes exceeds the number of scenes");
  for (std::size_t i = 0; i < truths.size(); ++i) {
    const auto& [id, x] = truths[i];
    if (x.width() % d != 0 || x.height() % d != 0)
      throw ShapeError("scene '" + id + "' (" + std::to_string(x.width()) + "x" + std::to_string(x.height()) +
                       ") is not divisible by scale " + std::to_string(d));
    if (x.bands() != S) throw ShapeError("scene '" + id + "' band count differs from the first scene");
    const auto pair = simulate_pair(x, R, C);
    SceneRecord rec{id, id + "_truth.hsc", id + "_msi.hsc", id + "_hsi.hsc",
                    i + n_test >= truths.size() ? "test" : "train"};
    write_hsc(out / rec.truth, x);
    write_hsc(out / rec.msi, pair.msi);
    write_hsc(out / rec.hsi, pair.hsi);
    m.scenes.push_back(rec);
  }
  m.save(out / "manifest.txt");

  KeyValueConfig resolved = cfg;
  resolved.set("scale", std::to_string(d));
  resolved.set("msi_bands", std::to_string(R.msi_bands()));
  resolved.set("hsi_bands", std::to_string(S));
  resolved.set("kernel_size", std::to_string(C.kernel.rows()));
  resolved.set("kernel_sigma", format_double(cfg.get_double("kernel_sigma", 2.0)));
  resolved.set("seed", std::to_string(seed));
  resolved.save(out / "resolved_config.txt");
  return {m.scenes};
}

TrainSummary cmd_train(const KeyValueConfig& cfg, const fs::path& out, std::ostream* progress) {
  prepare_out(out);
  if (precision_of(cfg) == Precision::double_) return train_impl<double>(cfg, out, progress);
  return train_impl<float>(cfg, out, progress);
}

EvalTable cmd_eval(const KeyValueConfig& cfg, const fs::path& out) {
  prepare_out(out);
  const Checkpoint ck = read_checkpoint(cfg.get("checkpoint"));
  const Manifest m = Manifest::load(cfg.get("manifest"));
  const auto scenes = m.select(cfg.get_or("split", "test"));
  if (scenes.empty()) throw ConfigError("no scenes in the requested split");
  const EvalTable t = precision_of(cfg) == Precision::double_ ? eval_impl<double>(ck, m, scenes)
                                                              : eval_impl<float>(ck, m, scenes);
  write_text(out / "eval.txt", t.aligned());
  write_text(out / "eval_metrics.txt", t.machine());
  KeyValueConfig resolved = cfg;
  resolved.set("split", cfg.get_or("split", "test"));
  resolved.set("precision", to_string(precision_of(cfg)));
  resolved.save(out / "resolved_config.txt");
  return t;
}

HsiCube cmd_fuse(const KeyValueConfig& cfg, const fs::path& out) {
  prepare_out(out);
  const Checkpoint ck = read_checkpoint(cfg.get("checkpoint"));
  const HsiCube msi = read_hsc(cfg.get("msi"));
  const HsiCube hsi = read_hsc(cfg.get("hsi"));
  HsiCube x;
  if (precision_of(cfg) == Precision::double_) {
    const auto net = load_network<double>(ck);
    if (hsi.bands() != net.config().hsi_bands || msi.bands() != net.config().msi_bands ||
        hsi.width() * net.config().scale != msi.width() || hsi.height() * net.config().scale != msi.height())
      throw ConfigError("fuse inputs do not match the checkpoint's network");
    x = fuse(net, msi, hsi);
  } else {
    const auto net = load_network<float>(ck);
    if (hsi.bands() != net.config().hsi_bands || msi.bands() != net.config().msi_bands ||
        hsi.width() * net.config().scale != msi.width() || hsi.height() * net.config().scale != msi.height())
      throw ConfigError("fuse inputs do not match the checkpoint's network");
    x = fuse(net, msi, hsi);
  }
  write_hsc(out / "fused.hsc", x);
  if (cfg.get_bool("dump_bands", false))
    for (Index b = 0; b < x.bands(); ++b) {
      char name[48];
      std::snprintf(name, sizeof name, "fused_band%03ld.pgm", static_cast<long>(b));
      write_band_pgm(out / name, x, b);
    }
  KeyValueConfig resolved = cfg;
  resolved.set("precision", to_string(precision_of(cfg)));
  resolved.set("dump_bands", cfg.get_bool("dump_bands", false) ? "true" : "false");
  resolved.save(out / "resolved_config.txt");
  return x;
}

EvalTable cmd_baseline(const KeyValueConfig& cfg, const fs::path& out) {
  prepare_out(out);
  const Manifest m = Manifest::load(cfg.get("manifest"));
  const auto scenes = m.select(cfg.get_or("split", "test"));
  if (scenes.empty()) throw ConfigError("no scenes in the requested split");
  FusionProblem<double> base;
  base.response = load_spectral_response(m.resolve(m.meta.get("srf")));
  const auto kernel = load_matrix_text(m.resolve(m.meta.get("kernel")));
  base.degradation = {kernel, m.scale()};
  base.prior = parse_prior_kind(cfg.get_or("prior", "quadratic"));
  base.lambda = cfg.get_double("lambda", 1e-3);
  SolveOptions so;
  so.eta = cfg.get_double("eta", 0.0);
  so.max_iters = static_cast<int>(cfg.get_int("max_iters", 500));
  so.rel_tol = cfg.get_double("rel_tol", 1e-8);
  so.power_iters = static_cast<int>(cfg.get_int("power_iters", 100));

  EvalTable t;
  for (const auto& rec : scenes) {
    const SceneData s = load_scene(m, rec);
    FusionProblem<double> p = base;
    p.msi = s.msi;
    p.hsi = s.hsi;
    const auto res = solve(p, so);
    write_hsc(out / ("baseline_" + s.id + ".hsc"), res.x);
    std::string trace = "iteration\tobjective\n";
    char buf[64];
    for (std::size_t i = 0; i < res.trace.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu\t%.17g\n", i, res.trace[i]);
      trace += buf;
    }
    write_text(out / ("trace_" + s.id + ".txt"), trace);
    const double d = static_cast<double>(m.scale());
    t.rows.push_back({s.id, "baseline", evaluate(res.x, s.truth, d)});
    t.rows.push_back({s.id, "bicubic", evaluate(bicubic_resize_to(s.hsi, s.truth.width(), s.truth.height()), s.truth, d)});
  }
  append_means(t, {"baseline", "bicubic"});
  write_text(out / "baseline.txt", t.aligned());
  write_text(out / "baseline_metrics.txt", t.machine());
  KeyValueConfig resolved = cfg;
  resolved.set("prior", to_string(base.prior));
  resolved.set("lambda", format_double(base.lambda));
  resolved.set("eta", format_double(so.eta));
  resolved.set("max_iters", std::to_string(so.max_iters));
  resolved.set("rel_tol", format_double(so.rel_tol));
  resolved.set("power_iters", std::to_string(so.power_iters));
  resolved.set("split", cfg.get_or("split", "test"));
  resolved.save(out / "resolved_config.txt");
  return t;
}

template class Trainer<float>;
template class Trainer<double>;
template HsiCube fuse<float>(const FusionNet<float>&, const HsiCube&, const HsiCube&);
template HsiCube fuse<double>(const FusionNet<double>&, const HsiCube&, const HsiCube&);

}  // namespace hsf
