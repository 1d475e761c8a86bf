#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "unlearn/binary_io.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/diffgraph.hpp"
#include "unlearn/models.hpp"
#include "unlearn/random.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

struct DSMConfig {
  double sigma = 0.5;
  std::size_t epochs = 300;
  std::size_t batch_size = 64;
  double learning_rate = 0.02;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma > 0.0)) throw DomainError("dsm: sigma must be positive");
    if (batch_size == 0) throw DomainError("dsm: batch_size must be positive");
    if (!(learning_rate > 0.0)) throw DomainError("dsm: learning_rate must be positive");
  }
};

/// Denoising score matching loss on one batch:
///   x~ = x + sigma * eps,  mean_i 1/2 || s(x~_i, y_i) + (x~_i - x_i) / sigma^2 ||^2.
/// The noise is an argument so callers (and tests) control it.
template <typename T>
LossEval<T> dsm_loss(const ScoreModel<T>& model, const Tensor<T>& x, std::span<const Label> labels,
                     const Tensor<T>& eps, bool param_grads = false) {
  check_batch(x, labels, model.data_dim(), "dsm_loss");
  if (eps.shape() != x.shape()) {
    throw ShapeError("dsm_loss: noise " + shape_string(eps.shape()) + " vs batch " + shape_string(x.shape()));
  }
  const T sigma = model.sigma;
  const Tensor<T> noisy = zip(x, eps, [sigma](T a, T e) { return a + sigma * e; });
  const Tensor<T> oh = one_hot<T>(labels, model.num_classes());

  DiffGraph<T> g;
  const NodeId clean = g.input("x");
  const NodeId xt = g.input("x_noisy");
  const NodeId onehot = g.input("onehot");
  const auto mlp = build_mlp(g, g.concat(xt, onehot), model.spec);
  const NodeId residual = g.add(mlp.output, g.scale(g.sub(xt, clean), T(1) / (sigma * sigma)));
  g.set_output(g.scale(g.sum(g.mul(residual, residual)), T(0.5) / static_cast<T>(x.rows())));

  Bindings<T> b(g);
  b.bind(clean, x).bind(xt, noisy).bind(onehot, oh);
  bind_params(b, mlp, model.params);

  LossEval<T> out;
  if (!param_grads) {
    out.loss = forward(g, b).item();
    return out;
  }
  auto grads = backward(g, b, mlp.params);
  out.loss = grads.value;
  for (auto id : mlp.params) out.param_grads.push_back(grads[id]);
  return out;
}

template <typename T>
void gradient_step(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads, T lr) {
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& w = params[p];
    const auto& g = grads[p];
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
  }
}

// Visits the minibatches of one epoch: a seeded shuffle, then consecutive
// slices of `batch` rows (the last one may be short).
template <typename F>
void for_each_batch(std::size_t n, std::size_t batch, Rng& rng, F&& f) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t start = 0; start < n; start += batch) {
    const std::size_t len = std::min(batch, n - start);
    f(std::span<const std::size_t>(order.data() + start, len));
  }
}

template <typename T>
struct ScoreTraining {
  ScoreModel<T> model;
  std::vector<double> loss_history;  // one entry per gradient step
};

/// Plain minibatch gradient descent on dsm_loss, fresh noise per batch.
template <typename T>
ScoreTraining<T> train_score(ScoreModel<T> model, const LabeledDataset<T>& data, const DSMConfig& cfg) {
  cfg.validate();
  data.validate();
  if (static_cast<T>(cfg.sigma) != model.sigma) {
    throw DomainError("train_score: config sigma differs from the model's sigma");
  }
  if (data.dim() != model.data_dim() || data.num_classes != model.num_classes()) {
    throw ShapeError("train_score: dataset does not match the score model's dimensions");
  }
  Rng rng(cfg.seed);
  std::normal_distribution<T> normal(T(0), T(1));
  ScoreTraining<T> out{std::move(model), {}};
  const T lr = static_cast<T>(cfg.learning_rate);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for_each_batch(data.size(), cfg.batch_size, rng, [&](std::span<const std::size_t> rows) {
      const auto batch = data.subset(rows);
      Tensor<T> eps(batch.features.shape());
      for (auto& e : eps.data()) e = normal(rng);
      auto eval = dsm_loss(out.model, batch.features, batch.labels, eps, true);
      if (!std::isfinite(eval.loss)) {
        throw NumericError("train_score: non-finite loss at step " + std::to_string(out.loss_history.size()));
      }
      out.loss_history.push_back(static_cast<double>(eval.loss));
      gradient_step(out.model.params, eval.param_grads, lr);
    });
  }
  return out;
}

inline std::string loss_history_csv(std::span<const double> history) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss\n";
  for (std::size_t i = 0; i < history.size(); ++i) os << i << ',' << history[i] << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Langevin dynamics

enum class SgldDirection : std::uint8_t { toward, away };

inline SgldDirection parse_direction(const std::string& s) {
  if (s == "toward") return SgldDirection::toward;
  if (s == "away") return SgldDirection::away;
  throw DomainError("unknown SGLD direction '" + s + "'");
}

struct SGLDConfig {
  double alpha = 1e-3;
  std::size_t steps = 1000;
  SgldDirection direction = SgldDirection::toward;
  std::uint64_t seed = 0;
  double divergence_bound = 1e6;

  void validate() const {
    if (!(alpha > 0.0)) throw DomainError("sgld: alpha must be positive");
    if (!(divergence_bound > 0.0)) throw DomainError("sgld: divergence bound must be positive");
  }
};

/// x_t = x_{t-1} +/- alpha * score(x_{t-1}, y) + sqrt(2 alpha) * eps_t, run on
/// every row of x0 as an independent chain. `visit(t, x_t)` sees states
/// t = 0..steps; the score callable maps (batch, labels) -> batch.
template <typename T, typename Score, typename Visit>
void sgld_visit(Score&& score, const Tensor<T>& x0, std::span<const Label> labels, const SGLDConfig& cfg,
                Visit&& visit) {
  cfg.validate();
  if (x0.rank() != 2 || x0.rows() != labels.size()) {
    throw ShapeError("sgld: start states " + shape_string(x0.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  Rng rng(cfg.seed);
  std::normal_distribution<T> normal(T(0), T(1));
  const T alpha = static_cast<T>(cfg.alpha);
  const T drift = cfg.direction == SgldDirection::toward ? alpha : -alpha;
  const T diffusion = std::sqrt(T(2) * alpha);
  const T bound = static_cast<T>(cfg.divergence_bound);

  Tensor<T> x = x0;
  visit(std::size_t{0}, static_cast<const Tensor<T>&>(x));
  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    const Tensor<T> s = score(static_cast<const Tensor<T>&>(x), labels);
    if (s.shape() != x.shape()) throw ShapeError("sgld: score returned " + shape_string(s.shape()));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += drift * s[i] + diffusion * normal(rng);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      T sq = T(0);
      for (T v : x.row(r)) sq += v * v;
      if (!(std::sqrt(sq) <= bound)) {
        throw NumericError("sgld: chain " + std::to_string(r) + " diverged at step " + std::to_string(t));
      }
    }
    visit(t, static_cast<const Tensor<T>&>(x));
  }
}

/// All steps + 1 states of the chains.
template <typename T, typename Score>
std::vector<Tensor<T>> sgld_run(Score&& score, const Tensor<T>& x0, std::span<const Label> labels,
                                const SGLDConfig& cfg) {
  std::vector<Tensor<T>> trajectory;
  trajectory.reserve(cfg.steps + 1);
  sgld_visit(std::forward<Score>(score), x0, labels, cfg,
             [&](std::size_t, const Tensor<T>& x) { trajectory.push_back(x); });
  return trajectory;
}

template <typename T>
auto model_score_fn(const ScoreModel<T>& model) {
  return [&model](const Tensor<T>& x, std::span<const Label> y) { return score_eval(model, x, y); };
}

template <typename T>
auto analytic_score_fn(const GaussianMixtureSpec& spec, double sigma) {
  return [spec, sigma](const Tensor<T>& x, std::span<const Label> y) {
    Tensor<T> out(x.shape());
    std::vector<double> row(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t j = 0; j < x.cols(); ++j) row[j] = static_cast<double>(x(r, j));
      const auto s = analytic_score(spec, sigma, row, y[r]);
      for (std::size_t j = 0; j < x.cols(); ++j) out(r, j) = static_cast<T>(s[j]);
    }
    return out;
  };
}

}  // namespace unlearn
