#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"

#include "unlearn/datasets.hpp"
#include "unlearn/metrics.hpp"
#include "unlearn/models.hpp"
#include "unlearn/poisonforge.hpp"
#include "unlearn/random.hpp"
#include "unlearn/scorelab.hpp"
#include "unlearn/victim.hpp"

namespace unlearn {

// All pipeline stages run in single precision; files store f32 anyway, so an
// in-memory hand-off and a save/load round trip are bitwise the same.
using Real = float;
using Dataset = LabeledDataset<Real>;

inline constexpr int kConfigSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
  std::string kind = "concentric_pair";  // concentric_pair | gaussian_pair | gaussian_mixture | two_moons
  std::size_t dim = 32;
  double inner_scale = 1.0;  // concentric_pair
  double outer_scale = 2.0;
  double offset = 3.0;  // gaussian_pair
  double scale = 1.0;
  std::size_t signal_dims = 1;
  GaussianMixtureSpec mixture;  // gaussian_mixture
  double noise = 0.1;           // two_moons
  std::size_t train_per_class = 500;
  std::size_t test_per_class = 1000;
};

struct ScoreStageConfig {
  std::vector<std::size_t> hidden{128, 128};
  Activation activation = Activation::tanh;
  double sigma = 0.5;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 0.02;
};

struct GeneratorStageConfig {
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  std::size_t epochs = 10;
  std::size_t batch_size = 128;
  double learning_rate = 0.1;
};

struct VictimStageConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
  std::size_t pgd_steps = 10;
  double pgd_step_size = 0.0;  // 0 -> rho_a / 4
};

struct VictimGridEntry {
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  std::vector<double> rho_a{0.0};
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 2024;
  DatasetConfig dataset;
  ScoreStageConfig score;
  PerturbationBudget budget;
  GeneratorStageConfig generator;
  VictimStageConfig victim;
  std::vector<VictimGridEntry> victims;
  std::vector<double> fractions{0.0, 0.25, 0.5, 0.75, 1.0};
  std::string output_dir = "runs/default";

  // Named stream of the root seed; every stage draws from its own stream.
  std::uint64_t stream(std::string_view name) const { return derive_seed(seed, name); }

  void validate() const;
};

/// The configuration shipped as configs/default.json.
inline ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.budget.rho_u = 0.5;
  c.budget.rho_a = 0.1;
  c.budget.alpha_u = 0.1;
  c.budget.alpha_s = 0.075;
  c.budget.alpha_a = 0.02;
  c.budget.k_u = 10;
  c.budget.k_a = 10;
  c.victims = {{{64, 64}, Activation::relu, {0.0, 0.25}},
               {{32}, Activation::relu, {0.0, 0.25}},
               {{128, 128}, Activation::relu, {0.0, 0.25}}};
  return c;
}

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
  }
}

inline void read(const json& j, const char* key, double& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_number()) throw ConfigError(where + "." + key + ": expected a number");
  out = j.at(key).get<double>();
}

// Values built in code arrive as signed integers; parsed text as unsigned.
inline bool is_count(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

inline void read(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!is_count(j.at(key))) throw ConfigError(where + "." + key + ": expected a non-negative integer");
  out = j.at(key).get<std::size_t>();
}

inline void read(const json& j, const char* key, std::string& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) throw ConfigError(where + "." + key + ": expected a string");
  out = j.at(key).get<std::string>();
}

inline void read(const json& j, const char* key, Activation& out, const std::string& where) {
  std::string s = activation_name(out);
  read(j, key, s, where);
  try {
    out = parse_activation(s);
  } catch (const DomainError& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void read(const json& j, const char* key, std::vector<std::size_t>& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array()) throw ConfigError(where + "." + key + ": expected an array");
  out.clear();
  for (const auto& v : a) {
    if (!is_count(v)) throw ConfigError(where + "." + key + ": expected non-negative integers");
    out.push_back(v.get<std::size_t>());
  }
}

inline void read(const json& j, const char* key, std::vector<double>& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& a = j.at(key);
  if (!a.is_array()) throw ConfigError(where + "." + key + ": expected an array");
  out.clear();
  for (const auto& v : a) {
    if (!v.is_number()) throw ConfigError(where + "." + key + ": expected numbers");
    out.push_back(v.get<double>());
  }
}

inline GaussianMixtureSpec mixture_from_json(const json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of classes");
  GaussianMixtureSpec spec;
  for (const auto& c : j) {
    check_keys(c, {"components", "weight"}, where);
    ClassDensity cls;
    read(c, "weight", cls.weight, where);
    if (!c.contains("components") || !c.at("components").is_array()) {
      throw ConfigError(where + ": every class needs a components array");
    }
    for (const auto& comp : c.at("components")) {
      check_keys(comp, {"mean", "scale"}, where);
      GaussianComponent g;
      read(comp, "mean", g.mean, where);
      read(comp, "scale", g.scale, where);
      cls.components.push_back(std::move(g));
    }
    spec.classes.push_back(std::move(cls));
  }
  return spec;
}

inline json mixture_to_json(const GaussianMixtureSpec& spec) {
  json out = json::array();
  for (const auto& c : spec.classes) {
    json comps = json::array();
    for (const auto& g : c.components) comps.push_back({{"mean", g.mean}, {"scale", g.scale}});
    out.push_back({{"components", comps}, {"weight", c.weight}});
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::read;
  ExperimentConfig c = default_experiment_config();
  detail::check_keys(j, {"schema_version", "seed", "dataset", "score", "budget", "generator", "victim_training",
                         "victims", "fractions", "output_dir"},
                     "config");
  if (!j.contains("schema_version") || !j.at("schema_version").is_number_integer()) {
    throw ConfigError("config: missing integer schema_version");
  }
  c.schema_version = j.at("schema_version").get<int>();
  if (c.schema_version != kConfigSchemaVersion) {
    throw ConfigError("config: unsupported schema_version " + std::to_string(c.schema_version));
  }
  if (j.contains("seed")) {
    if (!detail::is_count(j.at("seed"))) throw ConfigError("config.seed: expected a non-negative integer");
    c.seed = j.at("seed").get<std::uint64_t>();
  }
  read(j, "output_dir", c.output_dir, "config");
  read(j, "fractions", c.fractions, "config");

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    const std::string w = "config.dataset";
    detail::check_keys(d, {"kind", "dim", "inner_scale", "outer_scale", "offset", "scale", "signal_dims", "classes",
                           "noise", "train_per_class", "test_per_class"},
                       w);
    auto& ds = c.dataset;
    read(d, "kind", ds.kind, w);
    read(d, "dim", ds.dim, w);
    read(d, "inner_scale", ds.inner_scale, w);
    read(d, "outer_scale", ds.outer_scale, w);
    read(d, "offset", ds.offset, w);
    read(d, "scale", ds.scale, w);
    read(d, "signal_dims", ds.signal_dims, w);
    read(d, "noise", ds.noise, w);
    read(d, "train_per_class", ds.train_per_class, w);
    read(d, "test_per_class", ds.test_per_class, w);
    if (d.contains("classes")) ds.mixture = detail::mixture_from_json(d.at("classes"), w + ".classes");
  }
  if (j.contains("score")) {
    const auto& s = j.at("score");
    const std::string w = "config.score";
    detail::check_keys(s, {"hidden", "activation", "sigma", "epochs", "batch_size", "learning_rate"}, w);
    read(s, "hidden", c.score.hidden, w);
    read(s, "activation", c.score.activation, w);
    read(s, "sigma", c.score.sigma, w);
    read(s, "epochs", c.score.epochs, w);
    read(s, "batch_size", c.score.batch_size, w);
    read(s, "learning_rate", c.score.learning_rate, w);
  }
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    const std::string w = "config.budget";
    detail::check_keys(b, {"rho_u", "rho_a", "alpha_u", "alpha_s", "alpha_a", "k_u", "k_a", "init"}, w);
    read(b, "rho_u", c.budget.rho_u, w);
    read(b, "rho_a", c.budget.rho_a, w);
    read(b, "alpha_u", c.budget.alpha_u, w);
    read(b, "alpha_s", c.budget.alpha_s, w);
    read(b, "alpha_a", c.budget.alpha_a, w);
    read(b, "k_u", c.budget.k_u, w);
    read(b, "k_a", c.budget.k_a, w);
    std::string init = c.budget.init == NoiseInit::zero ? "zero" : "uniform";
    read(b, "init", init, w);
    if (init == "uniform") {
      c.budget.init = NoiseInit::uniform;
    } else if (init == "zero") {
      c.budget.init = NoiseInit::zero;
    } else {
      throw ConfigError(w + ".init: expected 'uniform' or 'zero'");
    }
  }
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    const std::string w = "config.generator";
    detail::check_keys(g, {"hidden", "activation", "epochs", "batch_size", "learning_rate"}, w);
    read(g, "hidden", c.generator.hidden, w);
    read(g, "activation", c.generator.activation, w);
    read(g, "epochs", c.generator.epochs, w);
    read(g, "batch_size", c.generator.batch_size, w);
    read(g, "learning_rate", c.generator.learning_rate, w);
  }
  if (j.contains("victim_training")) {
    const auto& v = j.at("victim_training");
    const std::string w = "config.victim_training";
    detail::check_keys(v, {"epochs", "batch_size", "learning_rate", "pgd_steps", "pgd_step_size"}, w);
    read(v, "epochs", c.victim.epochs, w);
    read(v, "batch_size", c.victim.batch_size, w);
    read(v, "learning_rate", c.victim.learning_rate, w);
    read(v, "pgd_steps", c.victim.pgd_steps, w);
    read(v, "pgd_step_size", c.victim.pgd_step_size, w);
  }
  if (j.contains("victims")) {
    const auto& vs = j.at("victims");
    if (!vs.is_array()) throw ConfigError("config.victims: expected an array");
    c.victims.clear();
    for (const auto& v : vs) {
      const std::string w = "config.victims[" + std::to_string(c.victims.size()) + "]";
      detail::check_keys(v, {"hidden", "activation", "rho_a"}, w);
      VictimGridEntry e;
      read(v, "hidden", e.hidden, w);
      read(v, "activation", e.activation, w);
      read(v, "rho_a", e.rho_a, w);
      c.victims.push_back(std::move(e));
    }
  }
  c.validate();
  return c;
}

inline nlohmann::json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::json ds = {{"kind", c.dataset.kind},
                       {"dim", c.dataset.dim},
                       {"train_per_class", c.dataset.train_per_class},
                       {"test_per_class", c.dataset.test_per_class}};
  if (c.dataset.kind == "concentric_pair") {
    ds["inner_scale"] = c.dataset.inner_scale;
    ds["outer_scale"] = c.dataset.outer_scale;
  } else if (c.dataset.kind == "gaussian_pair") {
    ds["offset"] = c.dataset.offset;
    ds["scale"] = c.dataset.scale;
    ds["signal_dims"] = c.dataset.signal_dims;
  } else if (c.dataset.kind == "gaussian_mixture") {
    ds["classes"] = detail::mixture_to_json(c.dataset.mixture);
  } else if (c.dataset.kind == "two_moons") {
    ds["noise"] = c.dataset.noise;
  }
  nlohmann::json victims = nlohmann::json::array();
  for (const auto& v : c.victims) {
    victims.push_back({{"hidden", v.hidden}, {"activation", activation_name(v.activation)}, {"rho_a", v.rho_a}});
  }
  return {{"schema_version", c.schema_version},
          {"seed", c.seed},
          {"dataset", ds},
          {"score",
           {{"hidden", c.score.hidden},
            {"activation", activation_name(c.score.activation)},
            {"sigma", c.score.sigma},
            {"epochs", c.score.epochs},
            {"batch_size", c.score.batch_size},
            {"learning_rate", c.score.learning_rate}}},
          {"budget",
           {{"rho_u", c.budget.rho_u},
            {"rho_a", c.budget.rho_a},
            {"alpha_u", c.budget.alpha_u},
            {"alpha_s", c.budget.alpha_s},
            {"alpha_a", c.budget.alpha_a},
            {"k_u", c.budget.k_u},
            {"k_a", c.budget.k_a},
            {"init", c.budget.init == NoiseInit::zero ? "zero" : "uniform"}}},
          {"generator",
           {{"hidden", c.generator.hidden},
            {"activation", activation_name(c.generator.activation)},
            {"epochs", c.generator.epochs},
            {"batch_size", c.generator.batch_size},
            {"learning_rate", c.generator.learning_rate}}},
          {"victim_training",
           {{"epochs", c.victim.epochs},
            {"batch_size", c.victim.batch_size},
            {"learning_rate", c.victim.learning_rate},
            {"pgd_steps", c.victim.pgd_steps},
            {"pgd_step_size", c.victim.pgd_step_size}}},
          {"victims", victims},
          {"fractions", c.fractions},
          {"output_dir", c.output_dir}};
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    const Bytes bytes = read_file(path);
    text.assign(bytes.begin(), bytes.end());
  } catch (const IoError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config: " + path.string() + " is not valid JSON (" + e.what() + ")");
  }
  return experiment_config_from_json(j);
}

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
  if (schema_version != kConfigSchemaVersion) fail("unsupported schema_version");
  const auto& d = dataset;
  if (d.kind == "concentric_pair") {
    if (d.dim == 0) fail("dataset.dim must be positive");
    if (!(d.inner_scale > 0.0) || !(d.outer_scale > 0.0)) fail("dataset scales must be positive");
  } else if (d.kind == "gaussian_pair") {
    if (d.dim == 0) fail("dataset.dim must be positive");
    if (!(d.scale > 0.0)) fail("dataset.scale must be positive");
    if (d.signal_dims == 0 || d.signal_dims > d.dim) fail("dataset.signal_dims must be in [1, dim]");
  } else if (d.kind == "gaussian_mixture") {
    try {
      d.mixture.validate();
    } catch (const Error& e) {
      fail(std::string("dataset.classes: ") + e.what());
    }
  } else if (d.kind == "two_moons") {
    if (!(d.noise >= 0.0)) fail("dataset.noise must be >= 0");
  } else {
    fail("unknown dataset kind '" + d.kind + "'");
  }
  if (d.train_per_class == 0 || d.test_per_class == 0) fail("dataset sizes must be >= 1");
  if (!(score.sigma > 0.0) || score.batch_size == 0 || !(score.learning_rate > 0.0)) fail("invalid score settings");
  for (auto h : score.hidden)
    if (h == 0) fail("score.hidden widths must be positive");
  try {
    budget.validate();
  } catch (const DomainError& e) {
    fail(e.what());
  }
  if (generator.batch_size == 0 || !(generator.learning_rate > 0.0)) fail("invalid generator settings");
  for (auto h : generator.hidden)
    if (h == 0) fail("generator.hidden widths must be positive");
  if (victim.batch_size == 0 || !(victim.learning_rate > 0.0)) fail("invalid victim_training settings");
  if (!(victim.pgd_step_size >= 0.0)) fail("victim_training.pgd_step_size must be >= 0");
  for (const auto& v : victims) {
    for (auto h : v.hidden)
      if (h == 0) fail("victims: hidden widths must be positive");
    if (v.rho_a.empty()) fail("victims: every entry needs at least one rho_a");
    for (double r : v.rho_a) {
      if (!(r >= 0.0)) fail("victims: rho_a must be >= 0");
      if (r > 0.0 && victim.pgd_steps == 0) fail("victim_training.pgd_steps must be >= 1 for rho_a > 0");
    }
  }
  for (double p : fractions)
    if (!(p >= 0.0 && p <= 1.0)) fail("fractions must lie in [0, 1]");
}

// ---------------------------------------------------------------------------
// Logging and artifact plumbing

/// Progress and artifact lines on stderr, serialized across worker threads.
class Log {
 public:
  explicit Log(bool quiet = false) : quiet_(quiet) {}

  void info(const std::string& msg) {
    if (quiet_) return;
    std::lock_guard lock(mu_);
    std::cerr << "unlearn: " << msg << '\n';
  }

  // Every written artifact is logged with its content hash.
  void artifact(const std::filesystem::path& path) {
    const auto h = fnv1a64(read_file(path));
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    info("wrote " + path.string() + " fnv1a64=" + hex);
  }

 private:
  bool quiet_;
  std::mutex mu_;
};

inline std::filesystem::path ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  return dir;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

/// "64-64" (hidden widths) with an optional "/tanh" suffix; "linear" for no hidden layer.
inline std::string hidden_tag(const std::vector<std::size_t>& hidden, Activation act) {
  std::string s;
  for (std::size_t i = 0; i < hidden.size(); ++i) s += (i ? "-" : "") + std::to_string(hidden[i]);
  if (s.empty()) return "linear";
  return act == Activation::relu ? s : s + "/" + activation_name(act);
}

inline std::pair<std::vector<std::size_t>, Activation> parse_hidden_tag(const std::string& tag) {
  std::string widths = tag;
  Activation act = Activation::relu;
  if (const auto slash = tag.find('/'); slash != std::string::npos) {
    widths = tag.substr(0, slash);
    try {
      act = parse_activation(tag.substr(slash + 1));
    } catch (const DomainError& e) {
      throw ConfigError(std::string("arch: ") + e.what());
    }
  }
  std::vector<std::size_t> hidden;
  if (widths == "linear") return {hidden, act};
  if (widths.empty() || widths.back() == '-') throw ConfigError("arch: cannot parse '" + tag + "'");
  std::stringstream ss(widths);
  std::string part;
  while (std::getline(ss, part, '-')) {
    if (part.empty() || part.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("arch: cannot parse '" + tag + "' (expected e.g. 64-64 or 32/tanh)");
    }
    const auto w = std::stoull(part);
    if (w == 0) throw ConfigError("arch: hidden widths must be positive");
    hidden.push_back(static_cast<std::size_t>(w));
  }
  if (hidden.empty()) throw ConfigError("arch: cannot parse '" + tag + "'");
  return {hidden, act};
}

inline std::string victim_stream(const std::vector<std::size_t>& hidden, Activation act, double rho_a) {
  return "victim/" + hidden_tag(hidden, act) + "/rho=" + format_number(rho_a);
}

// ---------------------------------------------------------------------------
// Stages. Each writes its artifacts under `out` and returns the in-memory result.

struct DataSplit {
  Dataset train;
  Dataset test;
  NormalizeTransform transform;
};

inline GaussianMixtureSpec mixture_of(const DatasetConfig& d) {
  if (d.kind == "concentric_pair") return concentric_pair(d.dim, d.inner_scale, d.outer_scale);
  if (d.kind == "gaussian_pair") return gaussian_pair(d.dim, d.offset, d.scale, d.signal_dims);
  if (d.kind == "gaussian_mixture") return d.mixture;
  throw ConfigError("dataset kind '" + d.kind + "' has no mixture density");
}

/// Generates train/test splits; both are normalized with the training statistics.
inline DataSplit make_data(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  Dataset train, test;
  if (d.kind == "two_moons") {
    train = gen_two_moons<Real>(d.train_per_class, d.noise, cfg.stream("data.train"));
    test = gen_two_moons<Real>(d.test_per_class, d.noise, cfg.stream("data.test"));
  } else {
    const auto spec = mixture_of(d);
    train = gen_mixture<Real>(spec, d.train_per_class, cfg.stream("data.train"), d.kind);
    test = gen_mixture<Real>(spec, d.test_per_class, cfg.stream("data.test"), d.kind);
  }
  auto [train_n, tr] = normalize(train);
  DataSplit out{std::move(train_n), tr.apply(std::move(test)), tr};
  out.train.name = out.test.name = d.kind;
  return out;
}

inline void write_data(const DataSplit& data, const std::filesystem::path& out, Log& log) {
  ensure_dir(out);
  save_dataset(out / "train.ulds", data.train);
  log.artifact(out / "train.ulds");
  save_dataset(out / "test.ulds", data.test);
  log.artifact(out / "test.ulds");
  const nlohmann::json j = {{"mean", data.transform.mean}, {"stddev", data.transform.stddev}};
  write_text(out / "normalization.json", j.dump(2) + "\n");
  log.artifact(out / "normalization.json");
}

inline ScoreModel<Real> run_train_score(const ExperimentConfig& cfg, const Dataset& train,
                                        const std::filesystem::path& out, Log& log) {
  const auto& s = cfg.score;
  const ArchSpec arch{train.dim() + train.num_classes, s.hidden, train.dim(), s.activation};
  auto model = init_score<Real>(arch, static_cast<Real>(s.sigma), cfg.stream("score.init"));
  DSMConfig dsm{s.sigma, s.epochs, s.batch_size, s.learning_rate, cfg.stream("score.train")};
  log.info("training score model " + arch.to_string() + " for " + std::to_string(s.epochs) + " epochs");
  auto trained = train_score(std::move(model), train, dsm);
  ensure_dir(out);
  save_model(out / "score.cwmd", trained.model);
  log.artifact(out / "score.cwmd");
  write_text(out / "score_loss.csv", loss_history_csv(trained.loss_history));
  log.artifact(out / "score_loss.csv");
  return std::move(trained.model);
}

struct SgldRequest {
  SGLDConfig sgld;
  std::size_t max_chains = 0;  // 0: one chain per data row
};

/// Runs one chain from every data row (its label fixes the class density) and
/// writes the final states plus the per-step mean state.
inline Dataset run_sample_sgld(const ScoreModel<Real>& score, const Dataset& data, const SgldRequest& req,
                               const std::filesystem::path& out, Log& log) {
  data.validate();
  if (score.data_dim() != data.dim() || score.num_classes() != data.num_classes) {
    throw ShapeError("sample-sgld: score model does not match the dataset");
  }
  Dataset chains = data;
  if (req.max_chains > 0 && req.max_chains < data.size()) {
    std::vector<std::size_t> rows(req.max_chains);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    chains = data.subset(rows);
  }
  std::ostringstream traj;
  traj.precision(9);
  traj << "step";
  for (std::size_t j = 0; j < chains.dim(); ++j) traj << ",mean_" << j;
  traj << '\n';
  Tensor<Real> last = chains.features;
  sgld_visit(model_score_fn(score), chains.features, chains.labels, req.sgld, [&](std::size_t t, const Tensor<Real>& x) {
    traj << t;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double m = 0.0;
      for (std::size_t r = 0; r < x.rows(); ++r) m += static_cast<double>(x(r, j));
      traj << ',' << m / static_cast<double>(x.rows());
    }
    traj << '\n';
    if (t == req.sgld.steps) last = x;
  });
  Dataset result{last, chains.labels, chains.num_classes, "sgld"};
  ensure_dir(out);
  save_dataset(out / "sgld.ulds", result);
  log.artifact(out / "sgld.ulds");
  write_text(out / "trajectory.csv", traj.str());
  log.artifact(out / "trajectory.csv");
  return result;
}

inline GeneratorTraining<Real> run_train_generator(const ExperimentConfig& cfg, const Dataset& train,
                                                   const ScoreModel<Real>& score, const std::filesystem::path& out,
                                                   Log& log) {
  const auto& g = cfg.generator;
  const ArchSpec arch{train.dim(), g.hidden, train.num_classes, g.activation};
  GeneratorTrainConfig gc;
  gc.iterations = iterations_for_epochs(train.size(), g.batch_size, g.epochs);
  gc.learning_rate = g.learning_rate;
  gc.batch_size = g.batch_size;
  gc.seed = cfg.stream("generator.train");
  log.info("training noise generator " + arch.to_string() + " for " + std::to_string(gc.iterations) +
           " iterations");
  auto trained =
      train_generator(init_classifier<Real>(arch, cfg.stream("generator.init")), score, train, cfg.budget, gc);
  ensure_dir(out);
  save_model(out / "generator.cwmd", trained.surrogate);
  log.artifact(out / "generator.cwmd");
  write_text(out / "generator_history.csv", generator_history_csv(trained.history));
  log.artifact(out / "generator_history.csv");
  return trained;
}

inline PoisonedDataset<Real> run_craft_noise(const ExperimentConfig& cfg, const ClassifierModel<Real>& generator,
                                             const ScoreModel<Real>& score, const Dataset& train,
                                             const std::filesystem::path& out, Log& log,
                                             BallMonitor* monitor = nullptr) {
  log.info("crafting noise for " + std::to_string(train.size()) + " examples");
  auto poison = emit_poison(generator, score, train, cfg.budget, cfg.stream("poison.emit"), monitor);
  ensure_dir(out);
  save_poison(out / "noise.ulpn", poison);
  log.artifact(out / "noise.ulpn");
  save_dataset(out / "poisoned.ulds", poison.poisoned());
  log.artifact(out / "poisoned.ulds");
  return poison;
}

struct VictimRequest {
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::relu;
  double rho_a = 0.0;
  double fraction = 1.0;  // ignored without noise
};

inline VictimTrainConfig victim_config(const ExperimentConfig& cfg, const Dataset& data, const VictimRequest& req) {
  VictimTrainConfig vc;
  vc.arch = ArchSpec{data.dim(), req.hidden, data.num_classes, req.activation};
  vc.epochs = cfg.victim.epochs;
  vc.batch_size = cfg.victim.batch_size;
  vc.learning_rate = cfg.victim.learning_rate;
  vc.rho_a_train = req.rho_a;
  vc.pgd_steps = cfg.victim.pgd_steps;
  vc.pgd_step_size = cfg.victim.pgd_step_size;
  vc.seed = cfg.stream(victim_stream(req.hidden, req.activation, req.rho_a));
  return vc;
}

/// Training data of a victim: clean data, or clean data with round(p n) rows
/// carrying their noise. The row choice uses one stream for every p.
inline Dataset victim_training_data(const ExperimentConfig& cfg, const Dataset& clean,
                                    const PoisonedDataset<Real>* poison, double fraction) {
  if (!poison) return clean;
  return mix_partial(clean, *poison, fraction, cfg.stream("mix"));
}

inline VictimTraining<Real> run_train_victim(const ExperimentConfig& cfg, const Dataset& clean,
                                             const PoisonedDataset<Real>* poison, const VictimRequest& req,
                                             const Dataset* test, const std::filesystem::path& out, Log& log) {
  const Dataset data = victim_training_data(cfg, clean, poison, req.fraction);
  const auto vc = victim_config(cfg, data, req);
  auto trained = train_victim(data, vc, test);
  ensure_dir(out);
  save_model(out / "victim.cwmd", trained.model);
  log.artifact(out / "victim.cwmd");
  write_text(out / "victim_history.csv", victim_history_csv(trained.history));
  log.artifact(out / "victim_history.csv");
  return trained;
}

// ---------------------------------------------------------------------------
// Full grid

struct ExperimentResult {
  std::vector<MetricsRecord> records;
  DataSplit data;
  ScoreModel<Real> score;
  GeneratorTraining<Real> generator;
  PoisonedDataset<Real> poison;
  BallMonitor emit_monitor;
};

inline std::string cell_name(const VictimGridEntry& v, double rho_a, std::optional<double> p) {
  std::string tag = hidden_tag(v.hidden, v.activation);
  std::replace(tag.begin(), tag.end(), '/', '_');
  return "h" + tag + "_rho" + format_number(rho_a) + (p ? "_p" + format_number(*p) : std::string("_clean"));
}

/// Runs data generation, score training, generator training, noise crafting and
/// the victim grid (victims x rho_a x fractions) under `out`. Victim trainings
/// are independent and may run on up to `jobs` threads; each owns its seeds, so
/// the results do not depend on `jobs`.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out,
                                       std::size_t jobs, Log& log) {
  cfg.validate();
  if (jobs == 0) throw ConfigError("--jobs must be >= 1");
  ensure_dir(out);
  write_text(out / "config.json", experiment_config_to_json(cfg).dump(2) + "\n");
  log.artifact(out / "config.json");

  auto data = make_data(cfg);
  write_data(data, out / "data", log);
  auto score = run_train_score(cfg, data.train, out / "score", log);
  auto gen = run_train_generator(cfg, data.train, score, out / "generator", log);
  BallMonitor emit_monitor;
  auto poison = run_craft_noise(cfg, gen.surrogate, score, data.train, out / "noise", log, &emit_monitor);
  const Dataset poisoned = poison.poisoned();

  const std::size_t k = data.train.num_classes;
  const double spread_clean = intra_class_spread(data.train.features, data.train.labels, k).pooled;
  const double spread_poisoned = intra_class_spread(poisoned.features, poisoned.labels, k).pooled;
  const double norm_clean = score_norm_stats(score, data.train).mean;
  const double norm_poisoned = score_norm_stats(score, poisoned).mean;

  write_scatter(out / "scatter_clean.svg", data.train.features, data.train.labels, {}, "clean training data");
  log.artifact(out / "scatter_clean.svg");
  const std::vector<std::uint8_t> all(poisoned.size(), 1);
  write_scatter(out / "scatter_poisoned.svg", poisoned.features, poisoned.labels, all, "poisoned training data");
  log.artifact(out / "scatter_poisoned.svg");

  // One task per victim training: the clean baseline of each (arch, rho_a)
  // pair, then one per protection fraction.
  struct Task {
    std::size_t entry;
    double rho_a;
    std::optional<double> fraction;
    double accuracy = 0.0;
  };
  std::vector<Task> tasks;
  for (std::size_t e = 0; e < cfg.victims.size(); ++e) {
    for (double rho : cfg.victims[e].rho_a) {
      tasks.push_back({e, rho, std::nullopt});
      for (double p : cfg.fractions) tasks.push_back({e, rho, p});
    }
  }
  const Dataset& test = data.test;
  auto run_task = [&](Task& t) {
    const auto& v = cfg.victims[t.entry];
    VictimRequest req{v.hidden, v.activation, t.rho_a, t.fraction.value_or(0.0)};
    const auto dir = out / "victims" / cell_name(v, t.rho_a, t.fraction);
    auto trained = run_train_victim(cfg, data.train, t.fraction ? &poison : nullptr, req, nullptr, dir, log);
    t.accuracy = evaluate(trained.model, test);
    log.info(cell_name(v, t.rho_a, t.fraction) + " test accuracy " + format_number(t.accuracy));
  };
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      try {
        run_task(tasks[i]);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        next = tasks.size();
      }
    }
  };
  const std::size_t threads = std::min(jobs, tasks.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  const ArchSpec surrogate_arch = gen.surrogate.spec;
  std::vector<MetricsRecord> records;
  for (std::size_t i = 0; i < tasks.size();) {
    const Task& clean = tasks[i++];
    const auto& v = cfg.victims[clean.entry];
    const ArchSpec victim_arch{data.train.dim(), v.hidden, k, v.activation};
    for (; i < tasks.size() && tasks[i].fraction; ++i) {
      const Task& t = tasks[i];
      MetricsRecord r;
      r.run_id = cell_name(v, t.rho_a, t.fraction);
      r.dataset = cfg.dataset.kind;
      r.surrogate_arch = surrogate_arch.to_string();
      r.victim_arch = victim_arch.to_string();
      r.rho_u = cfg.budget.rho_u;
      r.rho_a_train = t.rho_a;
      r.protection_fraction = *t.fraction;
      r.clean_test_acc = clean.accuracy;
      r.poisoned_test_acc = t.accuracy;
      r.mean_score_norm_clean = norm_clean;
      r.mean_score_norm_poisoned = norm_poisoned;
      r.intra_class_spread_clean = spread_clean;
      r.intra_class_spread_poisoned = spread_poisoned;
      records.push_back(std::move(r));
    }
  }
  write_report(out / "report.csv", records);
  log.artifact(out / "report.csv");
  return {std::move(records), std::move(data),   std::move(score),
          std::move(gen),     std::move(poison), emit_monitor};
}

}  // namespace unlearn
