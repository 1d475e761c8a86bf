#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "unlearn/datasets.hpp"
#include "unlearn/models.hpp"
#include "unlearn/poisonforge.hpp"
#include "unlearn/random.hpp"
#include "unlearn/scorelab.hpp"

namespace unlearn {

/// Victim training. rho_a_train == 0 is standard training; otherwise each
/// batch is replaced by a random-start PGD adversarial batch of radius rho_a_train.
struct VictimTrainConfig {
  ArchSpec arch;
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 0.1;
  double rho_a_train = 0.0;
  std::size_t pgd_steps = 10;
  double pgd_step_size = 0.0;  // 0 -> rho_a_train / 4
  std::uint64_t seed = 0;

  double step_size() const { return pgd_step_size > 0.0 ? pgd_step_size : rho_a_train / 4.0; }

  void validate() const {
    arch.validate();
    if (batch_size == 0) throw DomainError("victim: batch_size must be positive");
    if (!(learning_rate > 0.0)) throw DomainError("victim: learning_rate must be positive");
    if (!(rho_a_train >= 0.0)) throw DomainError("victim: rho_a_train must be >= 0");
    if (rho_a_train > 0.0 && pgd_steps == 0) throw DomainError("victim: pgd_steps must be >= 1");
  }
};

struct VictimEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean minibatch loss (on adversarial inputs when adversarial)
  double train_acc = 0.0;   // accuracy on the unperturbed training set after the epoch
  double test_acc = std::numeric_limits<double>::quiet_NaN();
};

template <typename T>
struct VictimTraining {
  ClassifierModel<T> model;
  std::vector<VictimEpoch> history;
  double max_adv_norm = 0.0;  // largest ||delta_a||_inf crafted during training
};

/// Fraction of rows whose argmax prediction equals the label.
template <typename T>
double evaluate(const ClassifierModel<T>& model, const LabeledDataset<T>& data) {
  data.validate();
  if (model.spec.output_dim != data.num_classes || model.spec.input_dim != data.dim()) {
    throw ShapeError("evaluate: model " + model.spec.to_string() + " vs dataset with d=" +
                     std::to_string(data.dim()) + ", K=" + std::to_string(data.num_classes));
  }
  const Labels pred = predict(model, data.features);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

/// Random-start PGD (maximization) inside the rho ball.
template <typename T>
Tensor<T> pgd_attack(const ClassifierModel<T>& model, const Tensor<T>& x, std::span<const Label> labels,
                     T rho, std::size_t steps, T step_size, Rng& rng) {
  Tensor<T> delta = detail::init_noise(x.shape(), rho, NoiseInit::uniform, rng);
  for (std::size_t k = 0; k < steps; ++k) {
    const Tensor<T> g = classify_loss(model, x + delta, labels, {.inputs = true}).input_grad;
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] += step_size * sign(g[i]);
    delta = project_linf(std::move(delta), rho);
  }
  return delta;
}

template <typename T>
VictimTraining<T> train_victim(const LabeledDataset<T>& data, const VictimTrainConfig& cfg,
                               const LabeledDataset<T>* test = nullptr) {
  cfg.validate();
  data.validate();
  if (cfg.arch.input_dim != data.dim() || cfg.arch.output_dim != data.num_classes) {
    throw ShapeError("train_victim: arch " + cfg.arch.to_string() + " does not fit the dataset");
  }
  VictimTraining<T> out{init_classifier<T>(cfg.arch, derive_seed(cfg.seed, "victim.init")), {}, 0.0};
  Rng batch_rng(derive_seed(cfg.seed, "victim.batches"));
  Rng pgd_rng(derive_seed(cfg.seed, "victim.pgd"));
  const T lr = static_cast<T>(cfg.learning_rate);
  const T rho = static_cast<T>(cfg.rho_a_train);
  const bool adversarial = cfg.rho_a_train > 0.0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for_each_batch(data.size(), cfg.batch_size, batch_rng, [&](std::span<const std::size_t> rows) {
      auto batch = data.subset(rows);
      if (adversarial) {
        const Tensor<T> da = pgd_attack(out.model, batch.features, batch.labels, rho, cfg.pgd_steps,
                                        static_cast<T>(cfg.step_size()), pgd_rng);
        const T m = max_abs(da);
        if (m > rho) throw NumericError("train_victim: adversarial noise escaped its ball");
        out.max_adv_norm = std::max(out.max_adv_norm, static_cast<double>(m));
        batch.features = batch.features + da;
      }
      auto eval = classify_loss(out.model, batch.features, batch.labels, {.params = true});
      if (!std::isfinite(eval.loss)) {
        throw NumericError("train_victim: non-finite loss in epoch " + std::to_string(epoch));
      }
      loss_sum += static_cast<double>(eval.loss);
      ++batches;
      gradient_step(out.model.params, eval.param_grads, lr);
    });
    VictimEpoch rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.train_acc = evaluate(out.model, data);
    if (test) rec.test_acc = evaluate(out.model, *test);
    out.history.push_back(rec);
  }
  return out;
}

inline std::string victim_history_csv(std::span<const VictimEpoch> history) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,train_loss,train_acc,test_acc\n";
  for (const auto& h : history) {
    os << h.epoch << ',' << h.train_loss << ',' << h.train_acc << ',' << h.test_acc << '\n';
  }
  return os.str();
}

/// Clean data with round(p * n) rows, chosen uniformly by seed, replaced by
/// their poisoned counterparts.
template <typename T>
LabeledDataset<T> mix_partial(const LabeledDataset<T>& clean, const PoisonedDataset<T>& poisoned, double p,
                              std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("mix_partial: fraction must be in [0, 1]");
  if (clean.size() != poisoned.base.size() || content_hash(clean) != content_hash(poisoned.base)) {
    throw DomainError("mix_partial: poisoned data is built on a different base dataset");
  }
  const std::size_t n = clean.size();
  const auto count = static_cast<std::size_t>(std::llround(p * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  LabeledDataset<T> out = clean;
  const std::size_t d = clean.dim();
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t r = order[i];
    for (std::size_t j = 0; j < d; ++j) out.features(r, j) += poisoned.noise(r, j);
  }
  return out;
}

}  // namespace unlearn
