#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"
#include "unlearn/models.hpp"

using namespace unlearn;
using testing_support::numeric_grad;
using testing_support::random_tensor;
using testing_support::rel_error;

namespace {

ArchSpec random_arch(std::mt19937_64& rng, std::size_t in, std::size_t out) {
  std::uniform_int_distribution<std::size_t> width(1, 6), depth(0, 2);
  ArchSpec a{in, {}, out, (rng() & 1) ? Activation::relu : Activation::tanh};
  for (std::size_t l = depth(rng); l > 0; --l) a.hidden.push_back(width(rng));
  return a;
}

Labels random_labels(std::mt19937_64& rng, std::size_t n, std::size_t k) {
  Labels y(n);
  for (auto& v : y) v = static_cast<Label>(std::uniform_int_distribution<std::size_t>(0, k - 1)(rng));
  return y;
}

}  // namespace

TEST(ClassifyLoss, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 1 + rng() % 4, k = 2 + rng() % 3, n = 1 + rng() % 5;
    auto model = init_classifier<double>(random_arch(rng, d, k), rng());
    for (std::size_t p = 1; p < model.params.size(); p += 2) model.params[p] = random_tensor(model.params[p].shape(), rng, -0.5, 0.5);
    const auto x = random_tensor({n, d}, rng, -2.0, 2.0);
    const auto y = random_labels(rng, n, k);
    const auto eval = classify_loss(model, x, y, {.inputs = true, .params = true});

    auto loss_at_x = [&](const Tensor<double>& probe) { return classify_loss(model, probe, y).loss; };
    ASSERT_LT(rel_error(eval.input_grad, numeric_grad(loss_at_x, x)), 1e-4) << model.spec.to_string();
    for (std::size_t p = 0; p < model.params.size(); ++p) {
      auto loss_at_p = [&](const Tensor<double>& probe) {
        auto m = model;
        m.params[p] = probe;
        return classify_loss(m, x, y).loss;
      };
      ASSERT_LT(rel_error(eval.param_grads[p], numeric_grad(loss_at_p, model.params[p])), 1e-4)
          << model.spec.to_string() << " param " << p;
    }
  }
}

TEST(ClassifyLoss, ZeroModelGivesLogK) {
  ArchSpec a{3, {4}, 5, Activation::relu};
  auto m = init_classifier<double>(a, 1);
  for (auto& p : m.params) p = Tensor<double>(p.shape());
  const auto x = Tensor<double>::matrix(2, 3, {1, 2, 3, -1, 0, 4});
  const Labels y{0, 4};
  EXPECT_NEAR(classify_loss(m, x, y).loss, std::log(5.0), 1e-12);
}

TEST(ClassifyLoss, MatchesHandComputedLinearModel) {
  // Linear 1-D model z = [w0 x, w1 x] with no bias.
  ArchSpec a{1, {}, 2, Activation::relu};
  auto m = init_classifier<double>(a, 0);
  m.params[0] = Tensor<double>::matrix(1, 2, {1.0, -1.0});
  m.params[1] = Tensor<double>(Shape{2});
  const auto x = Tensor<double>::matrix(1, 1, {0.5});
  const Labels y{1};
  // z = (0.5, -0.5): loss = log(1 + e^{1}).
  EXPECT_NEAR(classify_loss(m, x, y).loss, std::log1p(std::exp(1.0)), 1e-12);
}

TEST(ClassifyLoss, RejectsBadLabelsAndShapes) {
  auto m = init_classifier<double>(ArchSpec{2, {}, 2, Activation::relu}, 0);
  const auto x = Tensor<double>::matrix(1, 2, {0, 0});
  const Labels bad{2};
  EXPECT_THROW(classify_loss(m, x, bad), DomainError);
  const Labels two{0, 1};
  EXPECT_THROW(classify_loss(m, x, two), ShapeError);
  const auto wrong_dim = Tensor<double>::matrix(1, 3, {0, 0, 0});
  const Labels one{0};
  EXPECT_THROW(classify_loss(m, wrong_dim, one), ShapeError);
}

TEST(Predict, TiesGoToLowestClass) {
  auto m = init_classifier<double>(ArchSpec{2, {}, 3, Activation::relu}, 0);
  for (auto& p : m.params) p = Tensor<double>(p.shape());
  m.params[1] = Tensor<double>::vector({0.0, 1.0, 1.0});
  const auto x = Tensor<double>::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(predict(m, x), (Labels{1, 1}));
}

TEST(ScoreNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(37);
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 1 + rng() % 3, k = 2, n = 1 + rng() % 4;
    ArchSpec a = random_arch(rng, d + k, d);
    auto model = init_score<double>(a, 0.5, rng());
    for (std::size_t p = 1; p < model.params.size(); p += 2) model.params[p] = random_tensor(model.params[p].shape(), rng, -0.5, 0.5);
    const auto x = random_tensor({n, d}, rng, -2.0, 2.0);
    const auto y = random_labels(rng, n, k);
    const auto eval = score_norm_grad(model, x, y);
    auto total = [&](const Tensor<double>& probe) {
      const auto s = score_eval(model, probe, y);
      double acc = 0;
      for (std::size_t r = 0; r < s.rows(); ++r) {
        double sq = 0;
        for (double v : s.row(r)) sq += v * v;
        acc += std::sqrt(sq);
      }
      return acc;
    };
    EXPECT_NEAR(eval.total, total(x), 1e-12);
    ASSERT_LT(rel_error(eval.input_grad, numeric_grad(total, x)), 1e-4);
  }
}

TEST(Init, DeterministicAndWithinGlorotBound) {
  ArchSpec a{8, {16}, 2, Activation::relu};
  const auto m1 = init_classifier<float>(a, 42);
  const auto m2 = init_classifier<float>(a, 42);
  const auto m3 = init_classifier<float>(a, 43);
  EXPECT_EQ(m1, m2);
  EXPECT_NE(m1.params[0], m3.params[0]);
  const float bound = std::sqrt(6.0f / 24.0f);
  EXPECT_LE(max_abs(m1.params[0]), bound);
  EXPECT_EQ(max_abs(m1.params[1]), 0.0f);
  EXPECT_THROW(init_classifier<float>(ArchSpec{0, {}, 2, Activation::relu}, 0), DomainError);
  EXPECT_THROW(init_score<float>(ArchSpec{2, {}, 2, Activation::relu}, 0.5f, 0), DomainError);
  EXPECT_THROW(init_score<float>(ArchSpec{4, {}, 2, Activation::relu}, 0.0f, 0), DomainError);
}

TEST(Arch, StringForm) {
  EXPECT_EQ((ArchSpec{32, {64, 64}, 2, Activation::relu}).to_string(), "32-64-64-2/relu");
  EXPECT_EQ((ArchSpec{3, {}, 2, Activation::tanh}).to_string(), "3-2/tanh");
}

TEST(Serialization, RoundTripBothKinds) {
  const auto dir = testing_support::scratch_dir("models");
  const auto c = init_classifier<float>(ArchSpec{4, {5, 3}, 2, Activation::tanh}, 7);
  save_model(dir / "c.cwmd", c);
  EXPECT_EQ(load_classifier<float>(dir / "c.cwmd"), c);

  const auto s = init_score<double>(ArchSpec{6, {8}, 4, Activation::tanh}, 0.25, 9);
  save_model(dir / "s.cwmd", s);
  EXPECT_EQ(load_score<double>(dir / "s.cwmd"), s);
}

TEST(Serialization, RejectsWrongKindPrecisionAndCorruption) {
  const auto c = init_classifier<float>(ArchSpec{4, {5}, 2, Activation::relu}, 7);
  const auto bytes = encode(c);
  EXPECT_THROW(decode_score<float>(bytes), FormatError);
  EXPECT_THROW(decode_classifier<double>(bytes), FormatError);

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decode_classifier<float>(truncated), FormatError);

  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_classifier<float>(extra), FormatError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_classifier<float>(bad_magic), FormatError);

  auto bad_version = bytes;
  bad_version[4] = 99;
  EXPECT_THROW(decode_classifier<float>(bad_version), FormatError);

  auto bad_json = bytes;
  bad_json[4 + 4 + 1 + 4] = '#';
  EXPECT_THROW(decode_classifier<float>(bad_json), FormatError);

  EXPECT_THROW(load_classifier<float>("/nonexistent/dir/model.cwmd"), IoError);
}

TEST(ClassifyLoss, LinearModelOnFourPointsMatchesDirectFormula) {
  ArchSpec a{2, {}, 2, Activation::relu};
  auto m = init_classifier<double>(a, 0);
  m.params[0] = Tensor<double>::matrix(2, 2, {0.5, -1.0, 2.0, 0.25});
  m.params[1] = Tensor<double>::vector({0.1, -0.2});
  const auto x = Tensor<double>::matrix(4, 2, {1, 0, 0, 1, -1, 2, 0.5, -0.5});
  const Labels y{0, 1, 1, 0};
  double expected = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    double z[2];
    for (std::size_t c = 0; c < 2; ++c) {
      z[c] = m.params[1][c] + x(i, 0) * m.params[0](0, c) + x(i, 1) * m.params[0](1, c);
    }
    expected += std::log(std::exp(z[0]) + std::exp(z[1])) - z[y[i]];
  }
  EXPECT_NEAR(classify_loss(m, x, y).loss, expected / 4.0, 1e-12);
}

TEST(ClassifyLoss, ConfidentCorrectLogitsGiveNearZeroLoss) {
  auto m = init_classifier<double>(ArchSpec{1, {}, 2, Activation::relu}, 0);
  m.params[0] = Tensor<double>::matrix(1, 2, {0.0, 0.0});
  m.params[1] = Tensor<double>::vector({50.0, 0.0});
  const auto x = Tensor<double>::matrix(1, 1, {1.0});
  const Labels y{0};
  const double loss = classify_loss(m, x, y).loss;
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-20);
}

TEST(ScoreEval, ZeroWeightsGiveZeroScoreOfDataShape) {
  auto s = init_score<float>(ArchSpec{5, {7}, 3, Activation::tanh}, 0.5f, 3);
  for (auto& p : s.params) p = Tensor<float>(p.shape());
  const auto x = Tensor<float>::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  const Labels y{0, 1};
  const auto out = score_eval(s, x, y);
  EXPECT_EQ(out, Tensor<float>(Shape{2, 3}));
}
