#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "unlearn/binary_io.hpp"
#include "unlearn/datasets.hpp"
#include "unlearn/models.hpp"
#include "unlearn/poisonforge.hpp"

namespace unlearn {

struct SpreadResult {
  std::vector<double> per_class;  // mean pairwise L2 distance inside each class
  double pooled = 0.0;            // mean over all same-class pairs
};

/// Exact all-pairs computation. Singleton classes contribute 0 (and no pairs).
template <typename T>
SpreadResult intra_class_spread(const Tensor<T>& features, std::span<const Label> labels, std::size_t classes) {
  if (features.rank() != 2 || features.rows() != labels.size()) {
    throw ShapeError("intra_class_spread: features " + shape_string(features.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  check_labels(labels, classes, "intra_class_spread");
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) members[static_cast<std::size_t>(labels[i])].push_back(i);

  SpreadResult out;
  double pooled_sum = 0.0;
  double pooled_pairs = 0.0;
  const std::size_t d = features.cols();
  for (std::size_t c = 0; c < classes; ++c) {
    const auto& m = members[c];
    if (m.empty()) throw DomainError("intra_class_spread: class " + std::to_string(c) + " is empty");
    double sum = 0.0;
    for (std::size_t a = 0; a < m.size(); ++a) {
      for (std::size_t b = a + 1; b < m.size(); ++b) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = static_cast<double>(features(m[a], j)) - static_cast<double>(features(m[b], j));
          sq += diff * diff;
        }
        sum += std::sqrt(sq);
      }
    }
    const double pairs = 0.5 * static_cast<double>(m.size()) * static_cast<double>(m.size() - 1);
    out.per_class.push_back(pairs > 0.0 ? sum / pairs : 0.0);
    pooled_sum += sum;
    pooled_pairs += pairs;
  }
  out.pooled = pooled_pairs > 0.0 ? pooled_sum / pooled_pairs : 0.0;
  return out;
}

struct NormStats {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

/// Mean and population std of ||s(x_i, y_i)|| over the dataset.
template <typename T>
NormStats score_norm_stats(const ScoreModel<T>& score, const LabeledDataset<T>& data, std::size_t chunk = 512) {
  data.validate();
  std::vector<double> norms;
  norms.reserve(data.size());
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    rows.resize(std::min(chunk, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto part = data.subset(rows);
    const Tensor<T> s = score_eval(score, part.features, part.labels);
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double sq = 0.0;
      for (T v : s.row(r)) sq += static_cast<double>(v) * static_cast<double>(v);
      norms.push_back(std::sqrt(sq));
    }
  }
  NormStats st;
  for (double v : norms) st.mean += v;
  st.mean /= static_cast<double>(norms.size());
  for (double v : norms) st.stddev += (v - st.mean) * (v - st.mean);
  st.stddev = std::sqrt(st.stddev / static_cast<double>(norms.size()));
  return st;
}

// ---------------------------------------------------------------------------
// Report

/// Splits the rows into consecutive batches and counts the batches whose mean
/// score norm on the poisoned features is <= the mean on the clean features.
template <typename T>
std::pair<std::size_t, std::size_t> collapsed_batches(const ScoreModel<T>& score, const LabeledDataset<T>& clean,
                                                      const LabeledDataset<T>& poisoned, std::size_t batch) {
  clean.validate();
  poisoned.validate();
  if (batch == 0) throw DomainError("collapsed_batches: batch size must be positive");
  if (clean.labels != poisoned.labels || clean.features.shape() != poisoned.features.shape()) {
    throw ShapeError("collapsed_batches: clean and poisoned sets differ in shape or labels");
  }
  std::size_t wins = 0, total = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < clean.size(); start += batch) {
    rows.resize(std::min(batch, clean.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto a = clean.subset(rows);
    const auto b = poisoned.subset(rows);
    auto norm_sum = [&](const LabeledDataset<T>& part) {
      const Tensor<T> s = score_eval(score, part.features, part.labels);
      double total_norm = 0.0;
      for (std::size_t r = 0; r < s.rows(); ++r) {
        double sq = 0.0;
        for (T v : s.row(r)) sq += static_cast<double>(v) * static_cast<double>(v);
        total_norm += std::sqrt(sq);
      }
      return total_norm;
    };
    const double before = norm_sum(a);
    const double after = norm_sum(b);
    wins += after <= before ? 1 : 0;
    ++total;
  }
  return {wins, total};
}

/// One row of report.csv; the column order is the field order below.
struct MetricsRecord {
  std::string run_id;
  std::string dataset;
  std::string surrogate_arch;
  std::string victim_arch;
  double rho_u = 0.0;
  double rho_a_train = 0.0;
  double protection_fraction = 0.0;
  double clean_test_acc = 0.0;
  double poisoned_test_acc = 0.0;
  double mean_score_norm_clean = 0.0;
  double mean_score_norm_poisoned = 0.0;
  double intra_class_spread_clean = 0.0;
  double intra_class_spread_poisoned = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

inline constexpr const char* kReportHeader =
    "run_id,dataset,surrogate_arch,victim_arch,rho_u,rho_a_train,protection_fraction,clean_test_acc,"
    "poisoned_test_acc,mean_score_norm_clean,mean_score_norm_poisoned,intra_class_spread_clean,"
    "intra_class_spread_poisoned";

inline std::string report_csv(std::span<const MetricsRecord> records) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << kReportHeader << '\n';
  for (const auto& r : records) {
    for (const auto* s : {&r.run_id, &r.dataset, &r.surrogate_arch, &r.victim_arch}) {
      if (s->find_first_of(",\n\"") != std::string::npos) {
        throw DomainError("report: text field '" + *s + "' contains a delimiter");
      }
    }
    os << r.run_id << ',' << r.dataset << ',' << r.surrogate_arch << ',' << r.victim_arch << ',' << r.rho_u << ','
       << r.rho_a_train << ',' << r.protection_fraction << ',' << r.clean_test_acc << ',' << r.poisoned_test_acc
       << ',' << r.mean_score_norm_clean << ',' << r.mean_score_norm_poisoned << ',' << r.intra_class_spread_clean
       << ',' << r.intra_class_spread_poisoned << '\n';
  }
  return os.str();
}

inline void write_report(const std::filesystem::path& path, std::span<const MetricsRecord> records) {
  write_text(path, report_csv(records));
}

inline std::vector<MetricsRecord> parse_report(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw FormatError("report: unexpected header");
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 13) throw FormatError("report: expected 13 columns, got " + std::to_string(f.size()));
    MetricsRecord r{f[0], f[1], f[2], f[3]};
    double* nums[] = {&r.rho_u, &r.rho_a_train, &r.protection_fraction, &r.clean_test_acc, &r.poisoned_test_acc,
                      &r.mean_score_norm_clean, &r.mean_score_norm_poisoned, &r.intra_class_spread_clean,
                      &r.intra_class_spread_poisoned};
    for (std::size_t i = 0; i < 9; ++i) {
      try {
        *nums[i] = std::stod(f[4 + i]);
      } catch (const std::exception&) {
        throw FormatError("report: bad number '" + f[4 + i] + "'");
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2-D projection and scatter plots

struct Projection2D {
  Eigen::MatrixXd coords;               // n x 2
  std::array<double, 2> variance{};     // variance along each displayed axis
  bool pca = false;                     // false when the data already was 2-D
  Eigen::MatrixXd components;           // d x 2, column k is axis k (pca only)
};

/// Identity for d = 2 (d = 1 is padded with a zero axis); otherwise the top two
/// principal components, ordered by decreasing variance.
template <typename T>
Projection2D project_2d(const Tensor<T>& features) {
  const auto n = static_cast<Eigen::Index>(features.rows());
  const auto d = static_cast<Eigen::Index>(features.cols());
  Eigen::MatrixXd x(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = static_cast<double>(features(i, j));
  Projection2D p;
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  if (d <= 2) {
    p.coords = Eigen::MatrixXd::Zero(n, 2);
    p.coords.leftCols(d) = x;
  } else {
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    // eigenvalues ascend; the last two columns are the leading axes
    p.components.resize(d, 2);
    p.components.col(0) = eig.eigenvectors().col(d - 1);
    p.components.col(1) = eig.eigenvectors().col(d - 2);
    p.coords = centered * p.components;
    p.pca = true;
  }
  for (int k = 0; k < 2; ++k) {
    const double m = p.coords.col(k).mean();
    p.variance[static_cast<std::size_t>(k)] = (p.coords.col(k).array() - m).square().mean();
  }
  return p;
}

inline constexpr std::array<const char*, 10> kPalette = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                                         "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

/// SVG scatter: fill colour by class, poisoned rows (mask) drawn as crosses.
template <typename T>
std::string scatter_svg(const Tensor<T>& features, std::span<const Label> labels,
                        std::span<const std::uint8_t> poisoned_mask = {}, const std::string& title = "") {
  if (features.rows() != labels.size()) throw ShapeError("scatter_svg: features vs labels");
  if (!poisoned_mask.empty() && poisoned_mask.size() != labels.size()) {
    throw ShapeError("scatter_svg: mask length");
  }
  const Projection2D p = project_2d(features);
  const double size = 480.0, pad = 30.0;
  double lo[2] = {p.coords.col(0).minCoeff(), p.coords.col(1).minCoeff()};
  double hi[2] = {p.coords.col(0).maxCoeff(), p.coords.col(1).maxCoeff()};
  for (int k = 0; k < 2; ++k) {
    if (hi[k] - lo[k] < 1e-12) {
      lo[k] -= 1.0;
      hi[k] += 1.0;
    }
  }
  auto px = [&](double v, int k) {
    const double u = (v - lo[k]) / (hi[k] - lo[k]);
    return k == 0 ? pad + u * (size - 2 * pad) : size - pad - u * (size - 2 * pad);
  };
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
     << "\" viewBox=\"0 0 " << size << ' ' << size << "\">\n";
  os << "<metadata>projection=" << (p.pca ? "pca" : "identity") << ";variance=" << p.variance[0] << ','
     << p.variance[1] << "</metadata>\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << pad << "\" y=\"20\" font-size=\"14\">" << title << "</text>\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double cx = px(p.coords(r, 0), 0), cy = px(p.coords(r, 1), 1);
    const char* color = kPalette[static_cast<std::size_t>(labels[i]) % kPalette.size()];
    if (!poisoned_mask.empty() && poisoned_mask[i]) {
      os << "<path d=\"M" << cx - 3 << ' ' << cy - 3 << "L" << cx + 3 << ' ' << cy + 3 << "M" << cx - 3 << ' '
         << cy + 3 << "L" << cx + 3 << ' ' << cy - 3 << "\" stroke=\"" << color << "\" stroke-width=\"1.2\"/>\n";
    } else {
      os << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"2.5\" fill=\"" << color
         << "\" fill-opacity=\"0.7\"/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

template <typename T>
void write_scatter(const std::filesystem::path& path, const Tensor<T>& features, std::span<const Label> labels,
                   std::span<const std::uint8_t> poisoned_mask = {}, const std::string& title = "") {
  write_text(path, scatter_svg(features, labels, poisoned_mask, title));
}

}  // namespace unlearn
