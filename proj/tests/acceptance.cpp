// Acceptance checks. Prints one "AC<n> PASS|FAIL <details>" line per criterion
// and exits nonzero when any fails.
//
//   acceptance <work_dir> <config.json>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "gradient_suite.hpp"
#include "min_min_reference.hpp"
#include "unlearn/experiment.hpp"

using namespace unlearn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = testing_support::run_gradient_suite(100);
  const double elapsed = seconds_since(t0);
  std::string worst_name;
  double worst = 0.0;
  for (const auto& c : checks) {
    if (c.worst >= worst) {
      worst = c.worst;
      worst_name = c.name;
    }
  }
  const bool ok = worst < 1e-4 && elapsed < 60.0;
  return {ok, fmt("%zu suites x 100 instances, worst rel err %.2e (%s), %.1fs", checks.size(), worst,
                  worst_name.c_str(), elapsed)};
}

Outcome dsm_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  GaussianMixtureSpec spec;
  spec.classes.push_back({{GaussianComponent{{0.0, 0.0}, 1.0}}, 1.0});
  const double sigma = 0.5;
  const auto data = gen_mixture<float>(spec, 2000, 101, "gaussian");
  DSMConfig cfg;
  cfg.sigma = sigma;
  cfg.seed = 102;
  auto model = init_score<float>(default_score_arch(2, 1), static_cast<float>(sigma), 103);
  const auto trained = train_score(std::move(model), data, cfg);

  const std::size_t side = 20;
  Tensor<float> grid(Shape{side * side, 2});
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      grid(i * side + j, 0) = static_cast<float>(-3.0 + 6.0 * i / (side - 1));
      grid(i * side + j, 1) = static_cast<float>(-3.0 + 6.0 * j / (side - 1));
    }
  }
  const Labels y(side * side, 0);
  const auto s = score_eval(trained.model, grid, y);
  double mse = 0.0, ref = 0.0;
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    const std::vector<double> x{grid(r, 0), grid(r, 1)};
    const auto a = analytic_score(spec, sigma, x, 0);
    for (std::size_t j = 0; j < 2; ++j) {
      mse += (s(r, j) - a[j]) * (s(r, j) - a[j]);
      ref += a[j] * a[j];
    }
  }
  mse /= static_cast<double>(grid.rows());
  ref /= static_cast<double>(grid.rows());
  const double elapsed = seconds_since(t0);
  return {mse < 0.05 * ref && elapsed < 120.0,
          fmt("grid MSE %.4f vs 5%% of mean sq norm %.4f (ratio %.4f), %.1fs", mse, 0.05 * ref, mse / ref, elapsed)};
}

Outcome sgld_stationarity() {
  const auto t0 = std::chrono::steady_clock::now();
  GaussianMixtureSpec spec;
  spec.classes.push_back({{GaussianComponent{{3.0, -2.0}, 1.0}}, 1.0});
  const std::size_t chains = 1000, steps = 5000, pooled = 1000;
  SGLDConfig cfg;
  cfg.alpha = 1e-3;
  cfg.steps = steps;
  cfg.seed = 201;
  const Tensor<double> x0(Shape{chains, 2});
  const Labels y(chains, 0);
  double sum[2] = {0, 0}, sq[2] = {0, 0};
  std::size_t count = 0;
  sgld_visit(analytic_score_fn<double>(spec, 0.0), x0, y, cfg, [&](std::size_t t, const Tensor<double>& x) {
    if (t + pooled <= steps) return;
    for (std::size_t r = 0; r < chains; ++r) {
      for (std::size_t j = 0; j < 2; ++j) {
        sum[j] += x(r, j);
        sq[j] += x(r, j) * x(r, j);
      }
    }
    ++count;
  });
  const double n = static_cast<double>(count * chains);
  const double mean[2] = {sum[0] / n, sum[1] / n};
  const double var[2] = {sq[0] / n - mean[0] * mean[0], sq[1] / n - mean[1] * mean[1]};
  const double elapsed = seconds_since(t0);
  const bool ok = std::abs(mean[0] - 3.0) <= 0.1 && std::abs(mean[1] + 2.0) <= 0.1 && std::abs(var[0] - 1.0) <= 0.15 &&
                  std::abs(var[1] - 1.0) <= 0.15 && elapsed < 60.0;
  return {ok, fmt("mean (%.4f, %.4f) var (%.4f, %.4f) over last %zu steps, %.1fs", mean[0], mean[1], var[0], var[1],
                  pooled, elapsed)};
}

Outcome ball_invariants(const ExperimentResult& run) {
  std::mt19937_64 rng(301);
  std::uniform_real_distribution<double> radius(0.0, 2.0), value(-5.0, 5.0);
  std::size_t bad = 0;
  for (int t = 0; t < 10000; ++t) {
    const double rho = t % 100 == 0 ? 0.0 : radius(rng);
    Tensor<double> delta(Shape{1 + rng() % 8, 1 + rng() % 8});
    for (auto& v : delta.data()) v = value(rng);
    const auto p = project_linf(delta, rho);
    for (double v : p.data()) bad += std::abs(v) <= rho ? 0 : 1;
  }
  const auto& gm = run.generator.monitor;
  const auto& em = run.emit_monitor;
  const bool ok = bad == 0 && gm.violations == 0 && em.violations == 0 && gm.checks > 0 && em.checks > 0;
  return {ok, fmt("projection violations %zu/1e4 draws; training %zu checks %zu violations; emit %zu checks %zu "
                  "violations",
                  bad, gm.checks, gm.violations, em.checks, em.violations)};
}

Outcome collapse(const ExperimentResult& run) {
  const auto poisoned = run.poison.poisoned();
  const auto [wins, total] = collapsed_batches(run.score, run.data.train, poisoned, 128);
  const std::size_t k = run.data.train.num_classes;
  const double before = intra_class_spread(run.data.train.features, run.data.train.labels, k).pooled;
  const double after = intra_class_spread(poisoned.features, poisoned.labels, k).pooled;
  const double frac = static_cast<double>(wins) / static_cast<double>(total);
  return {frac >= 0.9 && after < before,
          fmt("score norm down on %zu/%zu batches (%.3f); spread %.4f -> %.4f", wins, total, frac, before, after)};
}

// report rows keyed by (victim arch, rho_a) then fraction
using Series = std::map<std::pair<std::string, double>, std::map<double, const MetricsRecord*>>;

Series series_of(const std::vector<MetricsRecord>& records) {
  Series s;
  for (const auto& r : records) s[{r.victim_arch, r.rho_a_train}][r.protection_fraction] = &r;
  return s;
}

const MetricsRecord* full(const Series& s, const std::string& arch, double rho) {
  const auto it = s.find({arch, rho});
  if (it == s.end()) return nullptr;
  const auto jt = it->second.find(1.0);
  return jt == it->second.end() ? nullptr : jt->second;
}

Outcome standard_protection(const Series& s, const std::string& arch, double elapsed) {
  const auto* r = full(s, arch, 0.0);
  if (!r) return {false, "no full-protection row for " + arch + " at rho_a=0"};
  const bool ok = r->clean_test_acc >= 0.95 && r->poisoned_test_acc <= r->clean_test_acc - 0.25 && elapsed < 300.0;
  return {ok, fmt("%s clean %.4f poisoned %.4f (drop %.4f); full experiment %.1fs", arch.c_str(), r->clean_test_acc,
                  r->poisoned_test_acc, r->clean_test_acc - r->poisoned_test_acc, elapsed)};
}

Outcome adversarial_protection(const Series& s, const std::string& arch, double rho) {
  const auto* r = full(s, arch, rho);
  if (!r) return {false, "no full-protection row for " + arch + fmt(" at rho_a=%g", rho)};
  const double drop = r->clean_test_acc - r->poisoned_test_acc;
  return {drop >= 0.15, fmt("%s rho_a=%g clean %.4f poisoned %.4f (drop %.4f, need >= 0.15)", arch.c_str(), rho,
                            r->clean_test_acc, r->poisoned_test_acc, drop)};
}

Outcome transfer(const Series& s, const std::vector<std::string>& archs, double rho) {
  bool ok = true;
  std::string detail;
  for (const auto& arch : archs) {
    for (double r : {0.0, rho}) {
      const auto* row = full(s, arch, r);
      if (!row) {
        ok = false;
        detail += arch + fmt(" rho_a=%g missing; ", r);
        continue;
      }
      const double drop = row->clean_test_acc - row->poisoned_test_acc;
      ok = ok && drop >= 0.15;
      detail += arch + fmt(" rho_a=%g drop %.4f%s; ", r, drop, drop >= 0.15 ? "" : " (short)");
    }
  }
  return {ok, detail.substr(0, detail.size() - 2)};
}

Outcome em_equivalence() {
  const auto data = gen_mixture<float>(gaussian_pair(2, 1.5, 1.0), 10, 401, "twenty");
  const auto sur = init_classifier<float>(ArchSpec{2, {16}, 2, Activation::relu}, 402);
  const auto score = init_score<float>(ArchSpec{4, {16}, 2, Activation::tanh}, 0.5f, 403);
  PerturbationBudget budget;
  budget.rho_u = 0.5;
  budget.alpha_u = 0.1;
  budget.alpha_s = 0.0;
  budget.k_u = 10;
  budget.k_a = 0;
  GeneratorTrainConfig cfg;
  cfg.iterations = 150;
  cfg.batch_size = 8;
  cfg.learning_rate = 0.1;
  cfg.seed = 404;
  const auto ref = testing_support::min_min_reference(sur, data, 0.5f, 0.1f, budget.k_u, 0.1f, cfg.batch_size,
                                                      cfg.iterations, cfg.seed);
  const auto lib = train_generator(sur, score, data, budget, cfg);
  std::size_t mismatched = lib.history.size() == ref.losses.size() ? 0 : 1;
  for (std::size_t i = 0; i < std::min(lib.history.size(), ref.losses.size()); ++i)
    mismatched += lib.history[i].loss == ref.losses[i] ? 0 : 1;
  const bool same_params = lib.surrogate == ref.model;
  double tail = 0.0;
  for (std::size_t i = ref.losses.size() - 10; i < ref.losses.size(); ++i) tail += ref.losses[i];
  tail /= 10.0;
  return {data.size() == 20 && mismatched == 0 && same_params && tail < 0.05,
          fmt("%zu points, %zu iterations: %zu loss mismatches, final params %s, last-10 loss %.4f", data.size(),
              ref.losses.size(), mismatched, same_params ? "identical" : "differ", tail)};
}

Outcome partial_protection(const Series& s) {
  bool ok = true;
  std::size_t pairs = 0;
  double worst = -1.0;
  for (const auto& [key, by_p] : s) {
    const MetricsRecord* prev = nullptr;
    for (const auto& [p, r] : by_p) {
      if (prev) {
        ++pairs;
        const double rise = r->poisoned_test_acc - prev->poisoned_test_acc;
        worst = std::max(worst, rise);
        ok = ok && rise <= 0.03;
      }
      prev = r;
    }
  }
  return {ok && pairs > 0, fmt("%zu series, %zu adjacent pairs, largest rise %.4f (tolerance 0.03)", s.size(), pairs,
                               worst)};
}

Outcome reproducible(const fs::path& a, const fs::path& b) {
  std::size_t files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    const auto rel = fs::relative(e.path(), a);
    if (!fs::exists(b / rel) || read_file(e.path()) != read_file(b / rel)) ++differ;
  }
  std::size_t other = 0;
  for (const auto& e : fs::recursive_directory_iterator(b)) other += e.is_regular_file() ? 1 : 0;
  const bool ok = files > 0 && differ == 0 && other == files && fs::exists(a / "report.csv");
  return {ok, fmt("%zu files compared, %zu differ, second run has %zu files", files, differ, other)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: acceptance <work_dir> <config.json>\n");
    return 2;
  }
  const fs::path work = argv[1];
  int failures = 0;
  auto report = [&](int id, const std::function<Outcome()>& check) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("AC%d %s %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };

  report(1, gradients);
  report(2, dsm_oracle);
  report(3, sgld_stationarity);

  std::optional<ExperimentResult> run;
  double run_seconds = 0.0;
  std::string run_error;
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(argv[2]);
    fs::remove_all(work);
    Log log(true);
    const auto t0 = std::chrono::steady_clock::now();
    run = run_experiment(cfg, work / "run1", 1, log);
    run_seconds = seconds_since(t0);
  } catch (const std::exception& e) {
    run_error = e.what();
  }
  auto with_run = [&](std::function<Outcome(const ExperimentResult&)> f) {
    return [&, f] { return run ? f(*run) : Outcome{false, "experiment failed: " + run_error}; };
  };
  const Series series = run ? series_of(run->records) : Series{};
  const auto& victims = cfg.victims;
  const std::size_t classes = run ? run->data.train.num_classes : 2;
  auto arch_of = [&](std::size_t i) {
    return ArchSpec{run ? run->data.train.dim() : 0, victims[i].hidden, classes, victims[i].activation}.to_string();
  };
  // The surrogate arch is the first grid entry; the others are transfer targets.
  const std::string surrogate = run ? run->generator.surrogate.spec.to_string() : "";
  std::vector<std::string> others;
  for (std::size_t i = 0; i < victims.size(); ++i)
    if (arch_of(i) != surrogate) others.push_back(arch_of(i));
  const double rho_adv = cfg.budget.rho_u / 2.0;

  report(4, with_run(ball_invariants));
  report(5, with_run(collapse));
  report(6, with_run([&](const ExperimentResult&) { return standard_protection(series, surrogate, run_seconds); }));
  report(7, with_run([&](const ExperimentResult&) { return adversarial_protection(series, surrogate, rho_adv); }));
  report(8, with_run([&](const ExperimentResult&) {
    if (others.empty()) return Outcome{false, "no transfer victims in the grid"};
    return transfer(series, others, rho_adv);
  }));
  report(9, em_equivalence);
  report(10, with_run([&](const ExperimentResult&) { return partial_protection(series); }));
  report(11, with_run([&](const ExperimentResult&) {
    Log log(true);
    run_experiment(cfg, work / "run2", 1, log);
    return reproducible(work / "run1", work / "run2");
  }));

  std::printf("acceptance: %d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
