#include <charconv>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "unlearn/experiment.hpp"

namespace fs = std::filesystem;
using namespace unlearn;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

// One line on stderr: "unlearn: error kind=<kind> msg=<message>".
int report_error(const char* kind, std::string msg, int code) {
  for (auto& c : msg)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << "unlearn: error kind=" << kind << " msg=" << msg << '\n';
  return code;
}

std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

ExperimentConfig config_or_default(const std::string& path) {
  return path.empty() ? default_experiment_config() : load_experiment_config(path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unlearn: score-guided unlearnable examples on synthetic data"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress progress lines on stderr");

  std::string config, out, data, score, generator, noise, model, arch = "64-64", test, direction = "toward";
  double fraction = 1.0, rho_a = 0.0, alpha = 1e-3;
  std::size_t steps = 1000, jobs = 1, chains = 0;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> seed_override;

  auto* gen_data = app.add_subcommand("gen-data", "generate and normalize train/test data");
  gen_data->add_option("--config", config, "experiment config (JSON); built-in default when omitted");
  gen_data->add_option("--out", out, "output directory")->required();

  auto* train_score_cmd = app.add_subcommand("train-score", "train the conditional score model by DSM");
  train_score_cmd->add_option("--config", config, "experiment config (JSON)");
  train_score_cmd->add_option("--data", data, "normalized training set (.ulds)")->required();
  train_score_cmd->add_option("--out", out, "output directory")->required();

  auto* sgld_cmd = app.add_subcommand("sample-sgld", "run Langevin chains from every data point");
  sgld_cmd->add_option("--score", score, "score model (.cwmd)")->required();
  sgld_cmd->add_option("--data", data, "start points and labels (.ulds)")->required();
  sgld_cmd->add_option("--alpha", alpha, "step size")->check(CLI::PositiveNumber);
  sgld_cmd->add_option("--steps", steps, "number of steps");
  sgld_cmd->add_option("--direction", direction, "toward | away")->check(CLI::IsMember({"toward", "away"}));
  sgld_cmd->add_option("--seed", seed, "noise seed");
  sgld_cmd->add_option("--chains", chains, "use only the first N rows (0: all)");
  sgld_cmd->add_option("--out", out, "output directory")->required();

  auto* gen_cmd = app.add_subcommand("train-generator", "train the noise generator (surrogate classifier)");
  gen_cmd->add_option("--config", config, "experiment config (JSON)");
  gen_cmd->add_option("--data", data, "normalized training set (.ulds)")->required();
  gen_cmd->add_option("--score", score, "trained score model (.cwmd)")->required();
  gen_cmd->add_option("--out", out, "output directory")->required();

  auto* craft_cmd = app.add_subcommand("craft-noise", "emit unlearnable noise for every training example");
  craft_cmd->add_option("--config", config, "experiment config (JSON) holding the budget");
  craft_cmd->add_option("--generator", generator, "trained generator (.cwmd)")->required();
  craft_cmd->add_option("--score", score, "trained score model (.cwmd)")->required();
  craft_cmd->add_option("--data", data, "normalized training set (.ulds)")->required();
  craft_cmd->add_option("--seed", seed_override, "override the noise-initialization seed");
  craft_cmd->add_option("--out", out, "output directory")->required();

  auto* victim_cmd = app.add_subcommand("train-victim", "train a victim classifier");
  victim_cmd->add_option("--config", config, "experiment config (JSON) for training settings and seeds");
  victim_cmd->add_option("--data", data, "clean training set (.ulds)")->required();
  victim_cmd->add_option("--noise", noise, "noise file (.ulpn) built on --data");
  victim_cmd->add_option("--fraction", fraction, "fraction of rows carrying noise")->check(CLI::Range(0.0, 1.0));
  victim_cmd->add_option("--arch", arch, "hidden widths, e.g. 64-64, 32, 128-128/tanh or linear");
  victim_cmd->add_option("--rho-a", rho_a, "adversarial-training radius (0: standard training)")
      ->check(CLI::NonNegativeNumber);
  victim_cmd->add_option("--test", test, "test set (.ulds) evaluated after every epoch");
  victim_cmd->add_option("--out", out, "output directory")->required();

  auto* eval_cmd = app.add_subcommand("evaluate", "print the accuracy of a classifier on a dataset");
  eval_cmd->add_option("--model", model, "classifier (.cwmd)")->required();
  eval_cmd->add_option("--data", data, "dataset (.ulds)")->required();

  auto* exp_cmd = app.add_subcommand("experiment", "run the full grid and write report.csv");
  exp_cmd->add_option("--config", config, "experiment config (JSON)")->required();
  exp_cmd->add_option("--out", out, "output directory (default: output_dir from the config)");
  exp_cmd->add_option("--jobs", jobs, "parallel victim trainings")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return report_error("usage", e.what(), kExitUsage);
  }

  Log log(quiet);
  try {
    if (*gen_data) {
      const auto cfg = config_or_default(config);
      write_data(make_data(cfg), out, log);
    } else if (*train_score_cmd) {
      const auto cfg = config_or_default(config);
      run_train_score(cfg, load_dataset<Real>(data), out, log);
    } else if (*sgld_cmd) {
      SgldRequest req;
      req.sgld.alpha = alpha;
      req.sgld.steps = steps;
      req.sgld.direction = parse_direction(direction);
      req.sgld.seed = seed;
      req.max_chains = chains;
      run_sample_sgld(load_score<Real>(score), load_dataset<Real>(data), req, out, log);
    } else if (*gen_cmd) {
      const auto cfg = config_or_default(config);
      run_train_generator(cfg, load_dataset<Real>(data), load_score<Real>(score), out, log);
    } else if (*craft_cmd) {
      auto cfg = config_or_default(config);
      const auto train = load_dataset<Real>(data);
      const auto gen = load_classifier<Real>(generator);
      const auto sc = load_score<Real>(score);
      if (seed_override) {
        // emit_poison seeds from the "poison.emit" stream; an explicit seed replaces it.
        auto poison = emit_poison(gen, sc, train, cfg.budget, *seed_override);
        ensure_dir(out);
        save_poison(fs::path(out) / "noise.ulpn", poison);
        log.artifact(fs::path(out) / "noise.ulpn");
        save_dataset(fs::path(out) / "poisoned.ulds", poison.poisoned());
        log.artifact(fs::path(out) / "poisoned.ulds");
      } else {
        run_craft_noise(cfg, gen, sc, train, out, log);
      }
    } else if (*victim_cmd) {
      const auto cfg = config_or_default(config);
      const auto clean = load_dataset<Real>(data);
      std::optional<PoisonedDataset<Real>> poison;
      if (!noise.empty()) poison = load_poison<Real>(noise, clean);
      std::optional<Dataset> test_set;
      if (!test.empty()) test_set = load_dataset<Real>(test);
      const auto [hidden, act] = parse_hidden_tag(arch);
      const VictimRequest req{hidden, act, rho_a, fraction};
      auto trained = run_train_victim(cfg, clean, poison ? &*poison : nullptr, req, test_set ? &*test_set : nullptr,
                                      out, log);
      if (test_set) std::cout << shortest(evaluate(trained.model, *test_set)) << '\n';
    } else if (*eval_cmd) {
      const auto m = load_classifier<Real>(model);
      std::cout << shortest(evaluate(m, load_dataset<Real>(data))) << '\n';
    } else if (*exp_cmd) {
      const auto cfg = load_experiment_config(config);
      run_experiment(cfg, out.empty() ? fs::path(cfg.output_dir) : fs::path(out), jobs, log);
    }
  } catch (const ConfigError& e) {
    return report_error(e.kind(), e.what(), kExitUsage);
  } catch (const NumericError& e) {
    return report_error(e.kind(), e.what(), kExitNumeric);
  } catch (const Error& e) {
    return report_error(e.kind(), e.what(), kExitFailure);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), kExitFailure);
  }
  return 0;
}
