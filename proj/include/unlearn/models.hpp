#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "unlearn/binary_io.hpp"
#include "unlearn/diffgraph.hpp"
#include "unlearn/errors.hpp"
#include "unlearn/random.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

using Label = int;
using Labels = std::vector<Label>;

enum class Activation : std::uint8_t { relu, tanh };

inline const char* activation_name(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw DomainError("unknown activation '" + s + "'");
}

/// Fully connected network layout: input_dim -> hidden... -> output_dim.
/// An empty hidden list is a single affine (linear) model.
struct ArchSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t output_dim = 1;
  Activation activation = Activation::relu;

  void validate() const {
    if (input_dim == 0 || output_dim == 0) throw DomainError("arch: dimensions must be positive");
    for (auto h : hidden) {
      if (h == 0) throw DomainError("arch: hidden widths must be positive");
    }
  }

  std::vector<std::size_t> layer_dims() const {
    std::vector<std::size_t> dims{input_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(output_dim);
    return dims;
  }

  std::size_t layer_count() const noexcept { return hidden.size() + 1; }

  // "16-64-64-2/relu"
  std::string to_string() const {
    std::ostringstream os;
    const auto dims = layer_dims();
    for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "-" : "") << dims[i];
    os << '/' << activation_name(activation);
    return os.str();
  }

  friend bool operator==(const ArchSpec&, const ArchSpec&) = default;
};

inline ArchSpec default_classifier_arch(std::size_t dim, std::size_t classes) {
  return ArchSpec{dim, {64, 64}, classes, Activation::relu};
}

inline ArchSpec default_score_arch(std::size_t dim, std::size_t classes) {
  return ArchSpec{dim + classes, {128, 128}, dim, Activation::tanh};
}

inline nlohmann::json arch_to_json(const ArchSpec& a) {
  return {{"input_dim", a.input_dim},
          {"hidden", a.hidden},
          {"output_dim", a.output_dim},
          {"activation", activation_name(a.activation)}};
}

inline ArchSpec arch_from_json(const nlohmann::json& j) {
  ArchSpec a;
  a.input_dim = j.at("input_dim").get<std::size_t>();
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.output_dim = j.at("output_dim").get<std::size_t>();
  a.activation = parse_activation(j.value("activation", std::string("relu")));
  a.validate();
  return a;
}

/// Parameters are stored layer by layer as [W0, b0, W1, b1, ...] with
/// W_l of shape [in, out] and b_l of shape [out].
template <typename T>
struct ClassifierModel {
  ArchSpec spec;
  std::vector<Tensor<T>> params;

  std::size_t num_classes() const noexcept { return spec.output_dim; }
  friend bool operator==(const ClassifierModel&, const ClassifierModel&) = default;
};

/// Class-conditional score network s(x, y): input is [x || onehot(y)], output lives in data space.
template <typename T>
struct ScoreModel {
  ArchSpec spec;
  std::vector<Tensor<T>> params;
  T sigma = T(0.5);

  std::size_t data_dim() const noexcept { return spec.output_dim; }
  std::size_t num_classes() const noexcept { return spec.input_dim - spec.output_dim; }
  friend bool operator==(const ScoreModel&, const ScoreModel&) = default;
};

/// Scaled-uniform (Glorot) weights with bound sqrt(6 / (fan_in + fan_out)); zero biases.
template <typename T>
std::vector<Tensor<T>> init_params(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::vector<Tensor<T>> params;
  const auto dims = spec.layer_dims();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l], out = dims[l + 1];
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
    Tensor<T> w(Shape{in, out});
    for (auto& v : w.data()) v = uniform<T>(rng, -bound, bound);
    params.push_back(std::move(w));
    params.emplace_back(Shape{out});
  }
  return params;
}

template <typename T>
ClassifierModel<T> init_classifier(const ArchSpec& spec, std::uint64_t seed) {
  return ClassifierModel<T>{spec, init_params<T>(spec, seed)};
}

template <typename T>
ScoreModel<T> init_score(const ArchSpec& spec, T sigma, std::uint64_t seed) {
  if (!(sigma > T(0))) throw DomainError("score model: sigma must be positive");
  if (spec.input_dim <= spec.output_dim) {
    throw DomainError("score model: input_dim must be data dim + class count");
  }
  return ScoreModel<T>{spec, init_params<T>(spec, seed), sigma};
}

// ---------------------------------------------------------------------------
// Graph construction

struct MlpNodes {
  std::vector<NodeId> params;
  NodeId output;
};

template <typename T>
MlpNodes build_mlp(DiffGraph<T>& g, NodeId input, const ArchSpec& spec) {
  MlpNodes nodes;
  NodeId h = input;
  for (std::size_t l = 0; l < spec.layer_count(); ++l) {
    const NodeId w = g.parameter("W" + std::to_string(l));
    const NodeId b = g.parameter("b" + std::to_string(l));
    nodes.params.push_back(w);
    nodes.params.push_back(b);
    h = g.affine(h, w, b);
    if (l + 1 < spec.layer_count()) {
      h = spec.activation == Activation::relu ? g.relu(h) : g.tanh(h);
    }
  }
  nodes.output = h;
  return nodes;
}

template <typename T>
void bind_params(Bindings<T>& b, const MlpNodes& nodes, const std::vector<Tensor<T>>& params) {
  if (params.size() != nodes.params.size()) {
    throw ShapeError("model: expected " + std::to_string(nodes.params.size()) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) b.bind(nodes.params[i], params[i]);
}

inline void check_labels(std::span<const Label> labels, std::size_t classes, const char* where) {
  for (Label y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DomainError(std::string(where) + ": label " + std::to_string(y) + " outside [0," +
                        std::to_string(classes) + ")");
    }
  }
}

template <typename T>
Tensor<T> label_tensor(std::span<const Label> labels) {
  Tensor<T> t(Shape{labels.size()});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = static_cast<T>(labels[i]);
  return t;
}

template <typename T>
Tensor<T> one_hot(std::span<const Label> labels, std::size_t classes) {
  check_labels(labels, classes, "one_hot");
  Tensor<T> t(Shape{labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) t(i, static_cast<std::size_t>(labels[i])) = T(1);
  return t;
}

template <typename T>
void check_batch(const Tensor<T>& x, std::span<const Label> labels, std::size_t dim, const char* where) {
  if (x.rank() != 2 || x.cols() != dim || x.rows() != labels.size()) {
    throw ShapeError(std::string(where) + ": batch " + shape_string(x.shape()) + " with " +
                     std::to_string(labels.size()) + " labels, expected [n x " + std::to_string(dim) + "]");
  }
}

// ---------------------------------------------------------------------------
// Classifier

template <typename T>
Tensor<T> logits(const ClassifierModel<T>& model, const Tensor<T>& x) {
  if (x.rank() != 2 || x.cols() != model.spec.input_dim) {
    throw ShapeError("logits: batch " + shape_string(x.shape()) + " for input_dim " +
                     std::to_string(model.spec.input_dim));
  }
  DiffGraph<T> g;
  const NodeId in = g.input("x");
  const auto mlp = build_mlp(g, in, model.spec);
  g.set_output(mlp.output);
  Bindings<T> b(g);
  b.bind(in, x);
  bind_params(b, mlp, model.params);
  return forward(g, b);
}

struct GradRequest {
  bool inputs = false;
  bool params = false;
};

template <typename T>
struct LossEval {
  T loss = T(0);
  Tensor<T> input_grad;                // set when requested
  std::vector<Tensor<T>> param_grads;  // set when requested, same layout as params
};

/// Mean softmax cross-entropy over the batch, with gradients on demand.
template <typename T>
LossEval<T> classify_loss(const ClassifierModel<T>& model, const Tensor<T>& x,
                          std::span<const Label> labels, GradRequest want = {}) {
  check_batch(x, labels, model.spec.input_dim, "classify_loss");
  check_labels(labels, model.num_classes(), "classify_loss");
  DiffGraph<T> g;
  const NodeId in = g.input("x", want.inputs);
  const NodeId lab = g.input("y");
  const auto mlp = build_mlp(g, in, model.spec);
  g.set_output(g.mean(g.softmax_xent(mlp.output, lab)));

  const Tensor<T> y = label_tensor<T>(labels);
  Bindings<T> b(g);
  b.bind(in, x).bind(lab, y);
  bind_params(b, mlp, model.params);

  LossEval<T> out;
  if (!want.inputs && !want.params) {
    out.loss = forward(g, b).item();
    return out;
  }
  std::vector<NodeId> wrt;
  if (want.inputs) wrt.push_back(in);
  if (want.params) wrt.insert(wrt.end(), mlp.params.begin(), mlp.params.end());
  auto grads = backward(g, b, wrt);
  out.loss = grads.value;
  if (want.inputs) out.input_grad = grads[in];
  if (want.params) {
    for (auto id : mlp.params) out.param_grads.push_back(grads[id]);
  }
  return out;
}

/// Predicted class per row; ties go to the lowest class index.
template <typename T>
Labels predict(const ClassifierModel<T>& model, const Tensor<T>& x) {
  const Tensor<T> z = logits(model, x);
  Labels out(z.rows());
  for (std::size_t i = 0; i < z.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < z.cols(); ++c) {
      if (z(i, c) > z(i, best)) best = c;
    }
    out[i] = static_cast<Label>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score network

template <typename T>
struct ScoreGraph {
  DiffGraph<T> graph;
  NodeId x, onehot;
  MlpNodes mlp;
};

template <typename T>
ScoreGraph<T> build_score_graph(const ScoreModel<T>& model, bool x_differentiable) {
  ScoreGraph<T> sg;
  sg.x = sg.graph.input("x", x_differentiable);
  sg.onehot = sg.graph.input("onehot");
  sg.mlp = build_mlp(sg.graph, sg.graph.concat(sg.x, sg.onehot), model.spec);
  return sg;
}

/// s(x, y) for every row of x.
template <typename T>
Tensor<T> score_eval(const ScoreModel<T>& model, const Tensor<T>& x, std::span<const Label> labels) {
  check_batch(x, labels, model.data_dim(), "score_eval");
  auto sg = build_score_graph(model, false);
  sg.graph.set_output(sg.mlp.output);
  const Tensor<T> oh = one_hot<T>(labels, model.num_classes());
  Bindings<T> b(sg.graph);
  b.bind(sg.x, x).bind(sg.onehot, oh);
  bind_params(b, sg.mlp, model.params);
  return forward(sg.graph, b);
}

template <typename T>
struct ScoreNormEval {
  T total = T(0);      // sum over rows of ||s(x_i, y_i)||
  Tensor<T> input_grad;  // row i holds d||s(x_i, y_i)|| / dx_i
};

template <typename T>
ScoreNormEval<T> score_norm_grad(const ScoreModel<T>& model, const Tensor<T>& x,
                                 std::span<const Label> labels) {
  check_batch(x, labels, model.data_dim(), "score_norm_grad");
  auto sg = build_score_graph(model, true);
  sg.graph.set_output(sg.graph.sum(sg.graph.l2_norm(sg.mlp.output)));
  const Tensor<T> oh = one_hot<T>(labels, model.num_classes());
  Bindings<T> b(sg.graph);
  b.bind(sg.x, x).bind(sg.onehot, oh);
  bind_params(b, sg.mlp, model.params);
  auto grads = backward(sg.graph, b, {sg.x});
  return {grads.value, grads[sg.x]};
}

// ---------------------------------------------------------------------------
// Serialization: "CWMD" | u32 version | u8 kind | u32 json length | json | raw params

inline constexpr std::uint32_t kModelFormatVersion = 1;

enum class ModelKind : std::uint8_t { classifier = 0, score = 1 };

template <typename T>
constexpr const char* precision_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

namespace detail {

template <typename T>
Bytes encode_model(ModelKind kind, const ArchSpec& spec, const std::vector<Tensor<T>>& params,
                   const nlohmann::json& extra) {
  nlohmann::json header = extra;
  header["arch"] = arch_to_json(spec);
  header["precision"] = precision_tag<T>();
  header["tensors"] = params.size();
  const std::string text = header.dump();

  ByteWriter w;
  w.magic("CWMD");
  w.put<std::uint32_t>(kModelFormatVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  for (const auto& p : params) w.put_all<T>(p.data());
  return w.take();
}

struct DecodedHeader {
  ArchSpec spec;
  nlohmann::json json;
};

template <typename T>
DecodedHeader decode_model(ByteReader& r, ModelKind expected, std::vector<Tensor<T>>& params) {
  r.expect_magic("CWMD");
  const auto version = r.get<std::uint32_t>();
  if (version != kModelFormatVersion) {
    throw FormatError("model: unsupported format version " + std::to_string(version));
  }
  const auto kind = r.get<std::uint8_t>();
  if (kind != static_cast<std::uint8_t>(expected)) {
    throw FormatError(std::string("model: file holds a ") + (kind == 0 ? "classifier" : "score") +
                      " model, expected " + (expected == ModelKind::classifier ? "classifier" : "score"));
  }
  const auto len = r.get<std::uint32_t>();
  DecodedHeader h;
  try {
    h.json = nlohmann::json::parse(r.get_string(len));
    h.spec = arch_from_json(h.json.at("arch"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model: malformed header: ") + e.what());
  }
  if (h.json.value("precision", std::string()) != precision_tag<T>()) {
    throw FormatError("model: precision tag '" + h.json.value("precision", std::string()) +
                      "' does not match requested " + precision_tag<T>());
  }
  const auto dims = h.spec.layer_dims();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    params.emplace_back(Shape{dims[l], dims[l + 1]}, r.template get_all<T>(dims[l] * dims[l + 1]));
    params.emplace_back(Shape{dims[l + 1]}, r.template get_all<T>(dims[l + 1]));
  }
  r.expect_end();
  return h;
}

}  // namespace detail

template <typename T>
Bytes encode(const ClassifierModel<T>& m) {
  return detail::encode_model<T>(ModelKind::classifier, m.spec, m.params, {{"kind", "classifier"}});
}

template <typename T>
Bytes encode(const ScoreModel<T>& m) {
  return detail::encode_model<T>(ModelKind::score, m.spec, m.params,
                                 {{"kind", "score"}, {"sigma", static_cast<double>(m.sigma)}});
}

template <typename Model>
void save_model(const std::filesystem::path& path, const Model& m) {
  write_file(path, encode(m));
}

template <typename T>
ClassifierModel<T> decode_classifier(std::span<const unsigned char> bytes) {
  ByteReader r(bytes, "model");
  ClassifierModel<T> m;
  m.spec = detail::decode_model<T>(r, ModelKind::classifier, m.params).spec;
  return m;
}

template <typename T>
ScoreModel<T> decode_score(std::span<const unsigned char> bytes) {
  ByteReader r(bytes, "model");
  ScoreModel<T> m;
  const auto h = detail::decode_model<T>(r, ModelKind::score, m.params);
  m.spec = h.spec;
  if (!h.json.contains("sigma")) throw FormatError("model: score model without sigma");
  m.sigma = static_cast<T>(h.json.at("sigma").template get<double>());
  return m;
}

template <typename T>
ClassifierModel<T> load_classifier(const std::filesystem::path& path) {
  return decode_classifier<T>(read_file(path));
}

template <typename T>
ScoreModel<T> load_score(const std::filesystem::path& path) {
  return decode_score<T>(read_file(path));
}

}  // namespace unlearn
