#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "unlearn/binary_io.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/models.hpp"
#include "unlearn/random.hpp"
#include "unlearn/scorelab.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

enum class NoiseInit : std::uint8_t { uniform, zero };

/// L-infinity PGD budgets. Stage one (defensive noise) uses rho_u, alpha_u
/// (classifier term), alpha_s (score-norm term) and k_u steps; stage two
/// (adversarial noise) uses rho_a, alpha_a and k_a steps.
struct PerturbationBudget {
  double rho_u = 0.5;
  double rho_a = 0.25;
  double alpha_u = 0.1;
  double alpha_s = 0.1;
  double alpha_a = 0.05;
  std::size_t k_u = 10;
  std::size_t k_a = 10;
  NoiseInit init = NoiseInit::uniform;

  static PerturbationBudget with_defaults(double rho_u, double rho_a) {
    PerturbationBudget b;
    b.rho_u = rho_u;
    b.rho_a = rho_a;
    b.alpha_u = b.alpha_s = rho_u / 5.0;
    b.alpha_a = rho_a / 5.0;
    return b;
  }

  // alpha_s may be 0: that switches the collapse term off (error-minimizing noise only).
  void validate() const {
    if (!(rho_u >= 0.0) || !(rho_a >= 0.0)) throw DomainError("budget: radii must be >= 0");
    if (k_u > 0 && (!(alpha_u > 0.0) || !(alpha_s >= 0.0))) {
      throw DomainError("budget: alpha_u must be > 0 and alpha_s >= 0 when k_u > 0");
    }
    if (k_a > 0 && !(alpha_a > 0.0)) throw DomainError("budget: alpha_a must be > 0 when k_a > 0");
  }
};

/// Counts ball checks made after projections; any violation throws, so
/// `violations` stays zero unless a caller inspects a failed run.
struct BallMonitor {
  std::size_t checks = 0;
  std::size_t violations = 0;
};

/// Elementwise clamp to [-rho, rho].
template <typename T>
Tensor<T> project_linf(Tensor<T> delta, T rho) {
  if (!(rho >= T(0))) throw DomainError("project_linf: radius must be >= 0");
  for (auto& v : delta.data()) v = std::clamp(v, -rho, rho);
  return delta;
}

namespace detail {

template <typename T>
Tensor<T> project_checked(Tensor<T> delta, T rho, BallMonitor* monitor, const char* where) {
  delta = project_linf(std::move(delta), rho);
  const T m = max_abs(delta);
  if (monitor) ++monitor->checks;
  if (m > rho) {
    if (monitor) ++monitor->violations;
    throw NumericError(std::string(where) + ": perturbation escaped its ball");
  }
  return delta;
}

template <typename T>
Tensor<T> init_noise(const Shape& shape, T rho, NoiseInit init, Rng& rng) {
  Tensor<T> delta(shape);
  if (init == NoiseInit::uniform && rho > T(0)) {
    std::uniform_real_distribution<T> dist(-rho, rho);
    for (auto& v : delta.data()) v = dist(rng);
  }
  return delta;
}

}  // namespace detail

/// Defensive noise for one batch: from the initial noise, k_u steps of
///   delta <- Proj_rho_u(delta - alpha_u sign(d loss/d delta) - alpha_s sign(d ||s(x+delta, y)|| / d delta))
/// with sign(0) = 0. The classifier and score model are read only.
template <typename T>
Tensor<T> craft_stage_one(const ClassifierModel<T>& surrogate, const ScoreModel<T>& score, const Tensor<T>& x,
                          std::span<const Label> labels, const PerturbationBudget& budget, Rng& rng,
                          BallMonitor* monitor = nullptr) {
  budget.validate();
  const T rho = static_cast<T>(budget.rho_u);
  const T au = static_cast<T>(budget.alpha_u);
  const T as = static_cast<T>(budget.alpha_s);
  Tensor<T> delta = detail::project_checked(detail::init_noise(x.shape(), rho, budget.init, rng), rho, monitor,
                                            "stage one");
  for (std::size_t k = 0; k < budget.k_u; ++k) {
    const Tensor<T> xp = x + delta;
    const Tensor<T> g = classify_loss(surrogate, xp, labels, {.inputs = true}).input_grad;
    if (as > T(0)) {
      const Tensor<T> s = score_norm_grad(score, xp, labels).input_grad;
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= au * sign(g[i]) + as * sign(s[i]);
    } else {
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] -= au * sign(g[i]);
    }
    delta = detail::project_checked(std::move(delta), rho, monitor, "stage one");
  }
  return delta;
}

/// Adversarial noise on already-poisoned inputs: zero start, k_a signed
/// ascent steps on the classifier loss, projected to the rho_a ball.
template <typename T>
Tensor<T> craft_stage_two(const ClassifierModel<T>& surrogate, const Tensor<T>& x_poisoned,
                          std::span<const Label> labels, const PerturbationBudget& budget,
                          BallMonitor* monitor = nullptr) {
  budget.validate();
  const T rho = static_cast<T>(budget.rho_a);
  const T aa = static_cast<T>(budget.alpha_a);
  Tensor<T> delta(x_poisoned.shape());
  for (std::size_t k = 0; k < budget.k_a; ++k) {
    const Tensor<T> g = classify_loss(surrogate, x_poisoned + delta, labels, {.inputs = true}).input_grad;
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += aa * sign(g[i]);
    delta = detail::project_checked(std::move(delta), rho, monitor, "stage two");
  }
  return delta;
}

struct GeneratorTrainConfig {
  std::size_t iterations = 0;  // M
  double learning_rate = 0.1;  // eta
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw DomainError("generator: learning_rate must be positive");
    if (batch_size == 0) throw DomainError("generator: batch_size must be positive");
  }
};

inline std::size_t iterations_for_epochs(std::size_t n, std::size_t batch_size, std::size_t epochs) {
  return epochs * ((n + batch_size - 1) / batch_size);
}

/// Cycles through a dataset in shuffled order; reshuffles whenever the
/// previous pass is exhausted (including before the first batch).
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch) : order_(n), batch_(batch), cursor_(n) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  std::span<const std::size_t> next(Rng& rng) {
    if (cursor_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng);
      cursor_ = 0;
    }
    const std::size_t len = std::min(batch_, order_.size() - cursor_);
    std::span<const std::size_t> out(order_.data() + cursor_, len);
    cursor_ += len;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t cursor_;
};

struct GeneratorStep {
  std::size_t iteration = 0;
  double loss = 0.0;             // loss on x + delta_u + delta_a before the update
  double mean_score_norm = 0.0;  // mean ||s(x + delta_u, y)|| over the batch
};

template <typename T>
struct GeneratorTraining {
  ClassifierModel<T> surrogate;
  std::vector<GeneratorStep> history;
  BallMonitor monitor;
};

template <typename T>
T mean_row_norm(const Tensor<T>& s) {
  T total = T(0);
  for (std::size_t r = 0; r < s.rows(); ++r) {
    T sq = T(0);
    for (T v : s.row(r)) sq += v * v;
    total += std::sqrt(sq);
  }
  return total / static_cast<T>(s.rows());
}

/// Trains the noise generator (the surrogate classifier) for `cfg.iterations`
/// minibatches: stage-one noise, stage-two adversarial noise, then one
/// gradient step on the loss at x + delta_u + delta_a. The score model is frozen.
template <typename T>
GeneratorTraining<T> train_generator(ClassifierModel<T> surrogate, const ScoreModel<T>& score,
                                     const LabeledDataset<T>& data, const PerturbationBudget& budget,
                                     const GeneratorTrainConfig& cfg) {
  budget.validate();
  cfg.validate();
  data.validate(true);
  if (surrogate.spec.input_dim != data.dim() || surrogate.num_classes() != data.num_classes) {
    throw ShapeError("train_generator: surrogate does not match the dataset");
  }
  if (score.data_dim() != data.dim() || score.num_classes() != data.num_classes) {
    throw ShapeError("train_generator: score model does not match the dataset");
  }
  GeneratorTraining<T> out{std::move(surrogate), {}, {}};
  Rng rng(cfg.seed);
  BatchSampler sampler(data.size(), cfg.batch_size);
  const T lr = static_cast<T>(cfg.learning_rate);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto batch = data.subset(sampler.next(rng));
    const Tensor<T> du = craft_stage_one(out.surrogate, score, batch.features, batch.labels, budget, rng,
                                         &out.monitor);
    const Tensor<T> xp = batch.features + du;
    const Tensor<T> da = craft_stage_two(out.surrogate, xp, batch.labels, budget, &out.monitor);
    auto eval = classify_loss(out.surrogate, xp + da, batch.labels, {.params = true});
    if (!std::isfinite(eval.loss)) {
      throw NumericError("train_generator: non-finite loss at iteration " + std::to_string(it));
    }
    const T norm = mean_row_norm(score_eval(score, xp, batch.labels));
    out.history.push_back({it, static_cast<double>(eval.loss), static_cast<double>(norm)});
    gradient_step(out.surrogate.params, eval.param_grads, lr);
  }
  return out;
}

inline std::string generator_history_csv(std::span<const GeneratorStep> history) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,loss,mean_score_norm\n";
  for (const auto& h : history) os << h.iteration << ',' << h.loss << ',' << h.mean_score_norm << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Poisoned datasets

/// Base data plus per-example defensive noise; poisoned features are base + noise.
template <typename T>
struct PoisonedDataset {
  LabeledDataset<T> base;
  Tensor<T> noise;
  PerturbationBudget budget;

  LabeledDataset<T> poisoned() const {
    LabeledDataset<T> out = base;
    out.features = base.features + noise;
    return out;
  }

  void validate() const {
    base.validate();
    if (noise.shape() != base.features.shape()) {
      throw ShapeError("poison: noise " + shape_string(noise.shape()) + " vs features " +
                       shape_string(base.features.shape()));
    }
    if (max_abs(noise) > static_cast<T>(budget.rho_u)) {
      throw DomainError("poison: noise exceeds the stored budget rho_u");
    }
  }
};

/// Final pass of stage one over every example with the trained (frozen) generator.
template <typename T>
PoisonedDataset<T> emit_poison(const ClassifierModel<T>& surrogate, const ScoreModel<T>& score,
                               const LabeledDataset<T>& data, const PerturbationBudget& budget,
                               std::uint64_t seed, BallMonitor* monitor = nullptr,
                               std::size_t chunk = 256) {
  budget.validate();
  data.validate();
  if (surrogate.spec.input_dim != data.dim() || surrogate.num_classes() != data.num_classes ||
      score.data_dim() != data.dim() || score.num_classes() != data.num_classes) {
    throw ShapeError("emit_poison: models do not match the dataset");
  }
  Rng rng(seed);
  PoisonedDataset<T> out{data, Tensor<T>(data.features.shape()), budget};
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    rows.resize(std::min(chunk, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto part = data.subset(rows);
    const Tensor<T> du = craft_stage_one(surrogate, score, part.features, part.labels, budget, rng, monitor);
    std::copy(du.data().begin(), du.data().end(), out.noise.data().begin() + static_cast<std::ptrdiff_t>(start * data.dim()));
  }
  out.validate();
  return out;
}

// "ULPN" | u32 version | u64 base hash | f32 rho_u rho_a alpha_u alpha_s alpha_a
//        | u32 k_u k_a | u64 n | u32 d | f32 noise

inline constexpr std::uint32_t kPoisonFormatVersion = 1;

template <typename T>
Bytes encode(const PoisonedDataset<T>& p) {
  p.validate();
  ByteWriter w;
  w.magic("ULPN");
  w.put<std::uint32_t>(kPoisonFormatVersion);
  w.put<std::uint64_t>(content_hash(p.base));
  for (double v : {p.budget.rho_u, p.budget.rho_a, p.budget.alpha_u, p.budget.alpha_s, p.budget.alpha_a}) {
    w.put<float>(static_cast<float>(v));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.budget.k_u));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.budget.k_a));
  w.put<std::uint64_t>(p.base.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(p.base.dim()));
  for (T v : p.noise.data()) w.put<float>(static_cast<float>(v));
  return w.take();
}

/// Decodes a noise file and pairs it with `base`; the stored hash must match.
template <typename T>
PoisonedDataset<T> decode_poison(std::span<const unsigned char> bytes, const LabeledDataset<T>& base) {
  ByteReader r(bytes, "poison");
  r.expect_magic("ULPN");
  const auto version = r.get<std::uint32_t>();
  if (version != kPoisonFormatVersion) {
    throw FormatError("poison: unsupported format version " + std::to_string(version));
  }
  const auto hash = r.get<std::uint64_t>();
  PoisonedDataset<T> p{base, Tensor<T>(base.features.shape()), {}};
  p.budget.rho_u = r.get<float>();
  p.budget.rho_a = r.get<float>();
  p.budget.alpha_u = r.get<float>();
  p.budget.alpha_s = r.get<float>();
  p.budget.alpha_a = r.get<float>();
  p.budget.k_u = r.get<std::uint32_t>();
  p.budget.k_a = r.get<std::uint32_t>();
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint32_t>();
  if (n != base.size() || d != base.dim()) throw FormatError("poison: noise dimensions do not match base dataset");
  if (hash != content_hash(base)) throw DomainError("poison: base dataset hash mismatch");
  const auto noise = r.get_all<float>(static_cast<std::size_t>(n) * d);
  r.expect_end();
  std::copy(noise.begin(), noise.end(), p.noise.data().begin());
  p.validate();
  return p;
}

template <typename T>
void save_poison(const std::filesystem::path& path, const PoisonedDataset<T>& p) {
  write_file(path, encode(p));
}

template <typename T>
PoisonedDataset<T> load_poison(const std::filesystem::path& path, const LabeledDataset<T>& base) {
  return decode_poison<T>(read_file(path), base);
}

}  // namespace unlearn
