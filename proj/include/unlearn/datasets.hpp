#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "unlearn/binary_io.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/models.hpp"
#include "unlearn/random.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

/// n labelled feature vectors; features is [n, d], labels in [0, num_classes).
template <typename T>
struct LabeledDataset {
  Tensor<T> features;
  Labels labels;
  std::size_t num_classes = 0;
  std::string name;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }

  // Throws unless the invariants hold; `all_classes` additionally demands
  // every class be represented (required of training splits).
  void validate(bool all_classes = false) const {
    if (labels.empty()) throw DomainError("dataset: no examples");
    if (num_classes == 0) throw DomainError("dataset: no classes");
    if (features.rank() != 2 || features.rows() != labels.size()) {
      throw ShapeError("dataset: features " + shape_string(features.shape()) + " vs " +
                       std::to_string(labels.size()) + " labels");
    }
    if (!features.all_finite()) throw NumericError("dataset: non-finite feature");
    check_labels(labels, num_classes, "dataset");
    if (all_classes) {
      std::vector<std::size_t> count(num_classes, 0);
      for (Label y : labels) ++count[static_cast<std::size_t>(y)];
      for (std::size_t c = 0; c < num_classes; ++c) {
        if (count[c] == 0) throw DomainError("dataset: class " + std::to_string(c) + " is empty");
      }
    }
  }

  LabeledDataset subset(std::span<const std::size_t> rows) const {
    LabeledDataset out{features.gather_rows(rows), {}, num_classes, name};
    out.labels.reserve(rows.size());
    for (auto r : rows) out.labels.push_back(labels[r]);
    return out;
  }

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

// ---------------------------------------------------------------------------
// Gaussian mixtures with isotropic components

struct GaussianComponent {
  std::vector<double> mean;
  double scale = 1.0;  // covariance scale^2 * I
};

// Components of one class are equally weighted.
struct ClassDensity {
  std::vector<GaussianComponent> components;
  double weight = 1.0;
};

struct GaussianMixtureSpec {
  std::vector<ClassDensity> classes;

  std::size_t dim() const { return classes.at(0).components.at(0).mean.size(); }
  std::size_t num_classes() const noexcept { return classes.size(); }

  void validate() const {
    if (classes.empty()) throw DomainError("mixture: no classes");
    double total = 0.0;
    const std::size_t d = classes[0].components.empty() ? 0 : classes[0].components[0].mean.size();
    if (d == 0) throw DomainError("mixture: zero-dimensional mean");
    for (const auto& c : classes) {
      if (c.components.empty()) throw DomainError("mixture: class without components");
      if (!(c.weight > 0.0)) throw DomainError("mixture: class weights must be positive");
      total += c.weight;
      for (const auto& comp : c.components) {
        if (comp.mean.size() != d) throw ShapeError("mixture: inconsistent mean dimensions");
        if (!(comp.scale > 0.0)) throw DomainError("mixture: cov_scale must be positive");
      }
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError("mixture: class weights must sum to 1");
  }
};

/// Two equally weighted classes N(+/-offset on the first `signal_dims` axes, scale^2 I) in R^dim.
inline GaussianMixtureSpec gaussian_pair(std::size_t dim, double offset, double scale,
                                         std::size_t signal_dims = 1) {
  GaussianMixtureSpec spec;
  for (int sgn : {-1, 1}) {
    GaussianComponent comp{std::vector<double>(dim, 0.0), scale};
    for (std::size_t j = 0; j < std::min(signal_dims, dim); ++j) comp.mean[j] = sgn * offset;
    spec.classes.push_back({{comp}, 0.5});
  }
  return spec;
}

/// Two classes sharing the origin as mean, told apart only by their scale:
/// the Bayes boundary is a sphere.
inline GaussianMixtureSpec concentric_pair(std::size_t dim, double inner_scale, double outer_scale) {
  GaussianMixtureSpec spec;
  for (double s : {inner_scale, outer_scale}) {
    spec.classes.push_back({{GaussianComponent{std::vector<double>(dim, 0.0), s}}, 0.5});
  }
  return spec;
}

/// n_per_class samples of every class, labels in class order. Pure function of (spec, seed).
template <typename T>
LabeledDataset<T> gen_mixture(const GaussianMixtureSpec& spec, std::size_t n_per_class,
                              std::uint64_t seed, std::string name = "gaussian_mixture") {
  spec.validate();
  if (n_per_class == 0) throw DomainError("gen_mixture: n_per_class must be >= 1");
  const std::size_t k = spec.num_classes(), d = spec.dim();
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset<T> ds{Tensor<T>(Shape{k * n_per_class, d}), {}, k, std::move(name)};
  ds.labels.reserve(k * n_per_class);
  std::size_t row = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const auto& comps = spec.classes[c].components;
    for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
      std::size_t pick = 0;
      if (comps.size() > 1) pick = std::uniform_int_distribution<std::size_t>(0, comps.size() - 1)(rng);
      const auto& comp = comps[pick];
      for (std::size_t j = 0; j < d; ++j) {
        ds.features(row, j) = static_cast<T>(comp.mean[j] + comp.scale * normal(rng));
      }
      ds.labels.push_back(static_cast<Label>(c));
    }
  }
  return ds;
}

/// Two interleaved unit half-circles: class 0 on (cos t, sin t), class 1 on
/// (1 - cos t, 0.5 - sin t), t evenly spaced on [0, pi], plus isotropic noise.
template <typename T>
LabeledDataset<T> gen_two_moons(std::size_t n_per_class, double noise_scale, std::uint64_t seed) {
  if (n_per_class == 0) throw DomainError("gen_two_moons: n_per_class must be >= 1");
  if (noise_scale < 0.0) throw DomainError("gen_two_moons: noise_scale must be >= 0");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset<T> ds{Tensor<T>(Shape{2 * n_per_class, 2}), {}, 2, "two_moons"};
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const double t = n_per_class == 1 ? 0.0
                                        : std::numbers::pi * static_cast<double>(i) /
                                              static_cast<double>(n_per_class - 1);
      double px = std::cos(t), py = std::sin(t);
      if (c == 1) {
        px = 1.0 - px;
        py = 0.5 - py;
      }
      const std::size_t row = c * n_per_class + i;
      ds.features(row, 0) = static_cast<T>(px + noise_scale * normal(rng));
      ds.features(row, 1) = static_cast<T>(py + noise_scale * normal(rng));
      ds.labels.push_back(static_cast<Label>(c));
    }
  }
  return ds;
}

namespace detail {

// log N(x; mean, var I)
inline double log_gauss(std::span<const double> x, std::span<const double> mean, double var) {
  double sq = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) sq += (x[j] - mean[j]) * (x[j] - mean[j]);
  const double d = static_cast<double>(x.size());
  return -0.5 * sq / var - 0.5 * d * std::log(2.0 * std::numbers::pi * var);
}

}  // namespace detail

/// log q_sigma(x | y): class density convolved with N(0, sigma^2 I).
inline double log_density(const GaussianMixtureSpec& spec, double sigma, std::span<const double> x,
                          Label y) {
  const auto& comps = spec.classes.at(static_cast<std::size_t>(y)).components;
  const double logw = -std::log(static_cast<double>(comps.size()));
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> terms;
  for (const auto& c : comps) {
    terms.push_back(logw + detail::log_gauss(x, c.mean, c.scale * c.scale + sigma * sigma));
    m = std::max(m, terms.back());
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - m);
  return m + std::log(acc);
}

/// Exact score of the sigma-smoothed class density: responsibility-weighted
/// component scores (mu_c - x) / (s_c^2 + sigma^2).
inline std::vector<double> analytic_score(const GaussianMixtureSpec& spec, double sigma,
                                          std::span<const double> x, Label y) {
  if (y < 0 || static_cast<std::size_t>(y) >= spec.num_classes()) {
    throw DomainError("analytic_score: class " + std::to_string(y) + " does not exist");
  }
  if (sigma < 0.0) throw DomainError("analytic_score: sigma must be >= 0");
  const auto& comps = spec.classes[static_cast<std::size_t>(y)].components;
  if (x.size() != comps[0].mean.size()) throw ShapeError("analytic_score: dimension mismatch");
  std::vector<double> logr;
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& c : comps) {
    logr.push_back(detail::log_gauss(x, c.mean, c.scale * c.scale + sigma * sigma));
    m = std::max(m, logr.back());
  }
  double z = 0.0;
  for (double& l : logr) z += (l = std::exp(l - m));
  std::vector<double> score(x.size(), 0.0);
  for (std::size_t c = 0; c < comps.size(); ++c) {
    const double r = logr[c] / z;
    const double var = comps[c].scale * comps[c].scale + sigma * sigma;
    for (std::size_t j = 0; j < x.size(); ++j) score[j] += r * (comps[c].mean[j] - x[j]) / var;
  }
  return score;
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-dimension affine map x -> (x - mean) / stddev (population stddev).
struct NormalizeTransform {
  std::vector<double> mean;
  std::vector<double> stddev;

  template <typename T>
  LabeledDataset<T> apply(LabeledDataset<T> ds) const {
    check(ds.dim());
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t j = 0; j < ds.dim(); ++j)
        ds.features(i, j) = static_cast<T>((static_cast<double>(ds.features(i, j)) - mean[j]) / stddev[j]);
    return ds;
  }

  template <typename T>
  LabeledDataset<T> invert(LabeledDataset<T> ds) const {
    check(ds.dim());
    for (std::size_t i = 0; i < ds.size(); ++i)
      for (std::size_t j = 0; j < ds.dim(); ++j)
        ds.features(i, j) = static_cast<T>(static_cast<double>(ds.features(i, j)) * stddev[j] + mean[j]);
    return ds;
  }

 private:
  void check(std::size_t d) const {
    if (mean.size() != d || stddev.size() != d) throw ShapeError("normalize: transform dimension mismatch");
  }
};

template <typename T>
std::pair<LabeledDataset<T>, NormalizeTransform> normalize(const LabeledDataset<T>& ds) {
  ds.validate();
  const std::size_t n = ds.size(), d = ds.dim();
  NormalizeTransform tr{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) tr.mean[j] += static_cast<double>(ds.features(i, j));
  for (auto& m : tr.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = static_cast<double>(ds.features(i, j)) - tr.mean[j];
      tr.stddev[j] += c * c;
    }
  for (std::size_t j = 0; j < d; ++j) {
    tr.stddev[j] = std::sqrt(tr.stddev[j] / static_cast<double>(n));
    if (!(tr.stddev[j] > 0.0)) {
      throw DomainError("normalize: zero variance in dimension " + std::to_string(j));
    }
  }
  return {tr.apply(ds), tr};
}

// ---------------------------------------------------------------------------
// "ULDS" | u32 version | u64 n | u32 d | u32 K | f32 features | u16 labels

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

template <typename T>
Bytes encode(const LabeledDataset<T>& ds) {
  ds.validate();
  ByteWriter w;
  w.magic("ULDS");
  w.put<std::uint32_t>(kDatasetFormatVersion);
  w.put<std::uint64_t>(ds.size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ds.num_classes));
  for (T v : ds.features.data()) w.put<float>(static_cast<float>(v));
  for (Label y : ds.labels) w.put<std::uint16_t>(static_cast<std::uint16_t>(y));
  return w.take();
}

template <typename T>
LabeledDataset<T> decode_dataset(std::span<const unsigned char> bytes, std::string name = {}) {
  ByteReader r(bytes, "dataset");
  r.expect_magic("ULDS");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetFormatVersion) {
    throw FormatError("dataset: unsupported format version " + std::to_string(version));
  }
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint32_t>();
  const auto k = r.get<std::uint32_t>();
  if (n == 0 || d == 0 || k == 0) throw FormatError("dataset: empty header dimensions");
  if (n > std::numeric_limits<std::size_t>::max() / d) throw FormatError("dataset: header overflow");
  const auto feats = r.get_all<float>(static_cast<std::size_t>(n) * d);
  const auto labs = r.get_all<std::uint16_t>(static_cast<std::size_t>(n));
  r.expect_end();
  LabeledDataset<T> ds{Tensor<T>(Shape{static_cast<std::size_t>(n), d},
                                 std::vector<T>(feats.begin(), feats.end())),
                       Labels(labs.begin(), labs.end()), k, std::move(name)};
  try {
    ds.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("dataset: invalid contents: ") + e.what());
  }
  return ds;
}

template <typename T>
void save_dataset(const std::filesystem::path& path, const LabeledDataset<T>& ds) {
  write_file(path, encode(ds));
}

/// The file format carries no name; the loaded dataset is named after the file stem.
template <typename T>
LabeledDataset<T> load_dataset(const std::filesystem::path& path) {
  return decode_dataset<T>(read_file(path), path.stem().string());
}

template <typename T>
std::uint64_t content_hash(const LabeledDataset<T>& ds) {
  return fnv1a64(encode(ds));
}

}  // namespace unlearn
