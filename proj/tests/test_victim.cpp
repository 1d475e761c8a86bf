#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "test_support.hpp"
#include "unlearn/victim.hpp"

using namespace unlearn;
using testing_support::random_tensor;

namespace {

LabeledDataset<float> pair_data(std::size_t n_per_class, std::uint64_t seed) {
  return gen_mixture<float>(gaussian_pair(4, 1.5, 1.0, 4), n_per_class, seed, "pair");
}

VictimTrainConfig small_config() {
  VictimTrainConfig cfg;
  cfg.arch = ArchSpec{4, {16}, 2, Activation::relu};
  cfg.epochs = 5;
  cfg.batch_size = 32;
  cfg.seed = 3;
  return cfg;
}

PoisonedDataset<float> fake_poison(const LabeledDataset<float>& base, float rho, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PoisonedDataset<float> p{base, random_tensor(base.features.shape(), rng, -rho, rho).cast<float>(), {}};
  p.budget.rho_u = rho;
  return p;
}

}  // namespace

TEST(Evaluate, MatchesBruteForceCount) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t d = 1 + rng() % 4, k = 2 + rng() % 3, n = 1 + rng() % 40;
    const auto model = init_classifier<float>(ArchSpec{d, {8}, k, Activation::relu}, rng());
    LabeledDataset<float> ds{random_tensor({n, d}, rng, -3, 3).cast<float>(), Labels(n), k, "r"};
    for (auto& y : ds.labels) y = static_cast<Label>(rng() % k);
    const auto z = logits(model, ds.features);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < k; ++c)
        if (z(i, c) > z(i, best)) best = c;
      hit += static_cast<Label>(best) == ds.labels[i];
    }
    ASSERT_EQ(evaluate(model, ds), static_cast<double>(hit) / n);
  }
}

TEST(Evaluate, SimpleCasesAndPermutationInvariance) {
  // Logits (x, -x): predicts 0 for x > 0, else 1.
  auto m = init_classifier<float>(ArchSpec{1, {}, 2, Activation::relu}, 0);
  m.params[0] = Tensor<float>::matrix(1, 2, {1, -1});
  LabeledDataset<float> ds{Tensor<float>::matrix(4, 1, {1, 2, -1, -2}), {0, 0, 1, 1}, 2, "h"};
  EXPECT_EQ(evaluate(m, ds), 1.0);
  ds.labels = {0, 1, 1, 0};
  EXPECT_EQ(evaluate(m, ds), 0.5);
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  EXPECT_EQ(evaluate(m, ds.subset(perm)), 0.5);
  LabeledDataset<float> wrong{Tensor<float>::matrix(1, 2, {0, 0}), {0}, 2, "w"};
  EXPECT_THROW(evaluate(m, wrong), ShapeError);
}

TEST(TrainVictim, ZeroRadiusIgnoresPgdSettings) {
  const auto data = pair_data(50, 2);
  auto a = small_config();
  auto b = a;
  b.pgd_steps = 37;
  b.pgd_step_size = 0.3;
  EXPECT_EQ(train_victim(data, a).model, train_victim(data, b).model);
}

TEST(TrainVictim, ZeroEpochsReturnsInitialization) {
  const auto data = pair_data(20, 2);
  auto cfg = small_config();
  cfg.epochs = 0;
  const auto out = train_victim(data, cfg);
  EXPECT_EQ(out.model, init_classifier<float>(cfg.arch, derive_seed(cfg.seed, "victim.init")));
  EXPECT_TRUE(out.history.empty());
}

TEST(TrainVictim, LearnsSeparablePair) {
  const auto train = pair_data(300, 4);
  const auto test = pair_data(300, 5);
  auto cfg = small_config();
  cfg.epochs = 20;
  const auto out = train_victim(train, cfg, &test);
  EXPECT_GE(evaluate(out.model, test), 0.95);
  ASSERT_EQ(out.history.size(), 20u);
  EXPECT_EQ(out.history.back().test_acc, evaluate(out.model, test));
  EXPECT_LT(out.history.back().train_loss, out.history.front().train_loss);
}

TEST(TrainVictim, AdversarialNoiseStaysInBallAndIsDeterministic) {
  const auto data = pair_data(40, 6);
  auto cfg = small_config();
  cfg.rho_a_train = 0.2;
  cfg.pgd_steps = 3;
  const auto a = train_victim(data, cfg);
  const auto b = train_victim(data, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_GT(a.max_adv_norm, 0.0);
  EXPECT_LE(a.max_adv_norm, static_cast<double>(0.2f));
  EXPECT_NE(a.model, train_victim(data, small_config()).model);
}

TEST(TrainVictim, InvalidConfigs) {
  const auto data = pair_data(10, 1);
  auto cfg = small_config();
  cfg.rho_a_train = 0.1;
  cfg.pgd_steps = 0;
  EXPECT_THROW(train_victim(data, cfg), DomainError);
  cfg = small_config();
  cfg.arch.input_dim = 3;
  EXPECT_THROW(train_victim(data, cfg), ShapeError);
  cfg = small_config();
  cfg.rho_a_train = -1;
  EXPECT_THROW(train_victim(data, cfg), DomainError);
}

TEST(PgdAttack, StaysInBallAndRaisesLoss) {
  const auto data = pair_data(100, 7);
  auto cfg = small_config();
  cfg.epochs = 10;
  const auto model = train_victim(data, cfg).model;
  Rng rng(8);
  const auto delta = pgd_attack(model, data.features, data.labels, 0.3f, 10, 0.075f, rng);
  EXPECT_LE(max_abs(delta), 0.3f);
  EXPECT_GT(classify_loss(model, data.features + delta, data.labels).loss,
            classify_loss(model, data.features, data.labels).loss);
}

TEST(MixPartial, CountsAndEndpoints) {
  const auto clean = pair_data(50, 9);
  const auto poison = fake_poison(clean, 0.5f, 10);
  EXPECT_EQ(mix_partial(clean, poison, 0.0, 1), clean);
  EXPECT_EQ(mix_partial(clean, poison, 1.0, 1), poison.poisoned());
  for (double p : {0.25, 0.5, 0.75, 0.33}) {
    const auto mixed = mix_partial(clean, poison, p, 2);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      bool row_changed = false, row_poisoned = true;
      for (std::size_t j = 0; j < clean.dim(); ++j) {
        row_changed |= mixed.features(i, j) != clean.features(i, j);
        row_poisoned &= mixed.features(i, j) == clean.features(i, j) + poison.noise(i, j);
      }
      if (row_changed) {
        ++changed;
        EXPECT_TRUE(row_poisoned);
      }
    }
    EXPECT_EQ(changed, static_cast<std::size_t>(std::llround(p * clean.size()))) << p;
    EXPECT_EQ(mixed.labels, clean.labels);
  }
  EXPECT_EQ(mix_partial(clean, poison, 0.5, 3), mix_partial(clean, poison, 0.5, 3));
  EXPECT_NE(mix_partial(clean, poison, 0.5, 3), mix_partial(clean, poison, 0.5, 4));
}

TEST(MixPartial, Errors) {
  const auto clean = pair_data(20, 9);
  const auto poison = fake_poison(clean, 0.5f, 10);
  EXPECT_THROW(mix_partial(clean, poison, 1.5, 1), DomainError);
  EXPECT_THROW(mix_partial(clean, poison, -0.1, 1), DomainError);
  EXPECT_THROW(mix_partial(pair_data(20, 11), poison, 0.5, 1), DomainError);
}

TEST(VictimHistoryCsv, Header) {
  const std::vector<VictimEpoch> h{{0, 0.5, 0.75, 0.7}};
  EXPECT_EQ(victim_history_csv(h), "epoch,train_loss,train_acc,test_acc\n0,0.5,0.75,0.69999999999999996\n");
}
