#pragma once

#include <algorithm>
#include <random>
#include <numeric>
#include <vector>

#include "unlearn/datasets.hpp"
#include "unlearn/models.hpp"

namespace testing_support {

using namespace unlearn;

// Minimal error-minimizing bi-level loop written from scratch: same RNG draw
// order as the library (epoch shuffle, then uniform noise init), but its own
// batching, PGD and parameter update. Gradients come from classify_loss,
// which is checked against finite differences elsewhere.
struct MinMinReference {
  ClassifierModel<float> model;
  std::vector<double> losses;
  std::vector<ClassifierModel<float>> snapshots;
};

inline MinMinReference min_min_reference(ClassifierModel<float> model, const LabeledDataset<float>& data, float rho,
                                         float alpha, std::size_t steps, float lr, std::size_t batch,
                                         std::size_t iterations, std::uint64_t seed) {
  MinMinReference ref{std::move(model), {}, {}};
  Rng rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  for (std::size_t it = 0; it < iterations; ++it) {
    if (cursor >= order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::size_t len = std::min(batch, order.size() - cursor);
    Tensor<float> x(Shape{len, data.dim()});
    Labels y(len);
    for (std::size_t r = 0; r < len; ++r) {
      for (std::size_t j = 0; j < data.dim(); ++j) x(r, j) = data.features(order[cursor + r], j);
      y[r] = data.labels[order[cursor + r]];
    }
    cursor += len;

    std::uniform_real_distribution<float> init(-rho, rho);
    Tensor<float> delta(x.shape());
    for (auto& v : delta.data()) v = init(rng);
    for (std::size_t k = 0; k < steps; ++k) {
      Tensor<float> xp = x;
      for (std::size_t i = 0; i < xp.size(); ++i) xp[i] += delta[i];
      const auto g = classify_loss(ref.model, xp, y, {.inputs = true}).input_grad;
      for (std::size_t i = 0; i < delta.size(); ++i) {
        const float s = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
        delta[i] = std::min(rho, std::max(-rho, delta[i] - alpha * s));
      }
    }
    Tensor<float> xp = x;
    for (std::size_t i = 0; i < xp.size(); ++i) xp[i] += delta[i];
    const auto eval = classify_loss(ref.model, xp, y, {.params = true});
    ref.losses.push_back(eval.loss);
    for (std::size_t p = 0; p < ref.model.params.size(); ++p)
      for (std::size_t i = 0; i < ref.model.params[p].size(); ++i) ref.model.params[p][i] -= lr * eval.param_grads[p][i];
    ref.snapshots.push_back(ref.model);
  }
  return ref;
}

}  // namespace testing_support
