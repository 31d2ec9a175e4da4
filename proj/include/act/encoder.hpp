#pragma once

// Small embedding encoder trained with a batch-hard triplet loss and, during
// source training, a softmax cross-entropy head. Gradients are written out by
// hand; there is no autodiff.

#include "act/common.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace act {

enum class Activation { identity, relu };

/// y = x * weight^T + bias, weight is (out x in).
struct Dense {
  Matrix weight;
  Vector bias;
};

struct EncoderParams {
  std::vector<Dense> layers;
  std::vector<Activation> activations;  // one per layer
  std::optional<Dense> head;            // classifier over source identities
  bool normalize = false;               // L2-normalise the embedding

  int input_dim() const { return static_cast<int>(layers.front().weight.cols()); }
  int embedding_dim() const { return static_cast<int>(layers.back().weight.rows()); }

  void validate() const {
    require(!layers.empty(), "encoder: no layers");
    require(activations.size() == layers.size(), "encoder: one activation per layer required");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      require(layer.bias.size() == layer.weight.rows(), "encoder: bias length does not match layer width");
      require(layer.weight.allFinite() && layer.bias.allFinite(), "encoder: non-finite parameter");
      if (l > 0) require(layer.weight.cols() == layers[l - 1].weight.rows(), "encoder: layer shapes do not chain");
    }
    if (head) {
      require(head->weight.cols() == layers.back().weight.rows(), "encoder: head input does not match embedding");
      require(head->bias.size() == head->weight.rows(), "encoder: head bias length mismatch");
      require(head->weight.allFinite() && head->bias.allFinite(), "encoder: non-finite head parameter");
    }
  }

  friend bool operator==(const EncoderParams& a, const EncoderParams& b) {
    auto same = [](const Dense& x, const Dense& y) {
      return x.weight.rows() == y.weight.rows() && x.weight.cols() == y.weight.cols() && x.weight == y.weight &&
             x.bias.size() == y.bias.size() && x.bias == y.bias;
    };
    if (a.layers.size() != b.layers.size() || a.activations != b.activations || a.normalize != b.normalize ||
        a.head.has_value() != b.head.has_value())
      return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
      if (!same(a.layers[l], b.layers[l])) return false;
    return !a.head || same(*a.head, *b.head);
  }
};

/// Calls f on matching tensors of congruent parameter sets (weights, then biases, layer by layer, then head).
template <class F, class First, class... Rest>
void zip_tensors(F&& f, First& first, Rest&... rest) {
  for (std::size_t l = 0; l < first.layers.size(); ++l) {
    f(first.layers[l].weight, rest.layers[l].weight...);
    f(first.layers[l].bias, rest.layers[l].bias...);
  }
  if (first.head) {
    f(first.head->weight, rest.head->weight...);
    f(first.head->bias, rest.head->bias...);
  }
}

inline EncoderParams zeros_like(const EncoderParams& p) {
  EncoderParams z = p;
  zip_tensors([](auto& t) { t.setZero(); }, z);
  return z;
}

inline std::size_t parameter_count(const EncoderParams& p) {
  std::size_t n = 0;
  zip_tensors([&](const auto& t) { n += static_cast<std::size_t>(t.size()); }, p);
  return n;
}

struct EncoderSpec {
  int hidden = 0;  // 0: single linear layer
  int embedding = 32;
  bool normalize = true;
};

inline EncoderParams init_encoder(int input_dim, const EncoderSpec& spec, int n_classes, std::uint64_t seed) {
  require(input_dim >= 1 && spec.embedding >= 1 && spec.hidden >= 0, "encoder: invalid dimensions");
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto dense = [&](int in, int out, double scale) {
    Dense d{Matrix(out, in), Vector::Zero(out)};
    for (Eigen::Index r = 0; r < d.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < d.weight.cols(); ++c) d.weight(r, c) = scale * normal(rng);
    return d;
  };
  EncoderParams p;
  p.normalize = spec.normalize;
  if (spec.hidden > 0) {
    p.layers.push_back(dense(input_dim, spec.hidden, std::sqrt(2.0 / input_dim)));
    p.activations.push_back(Activation::relu);
    p.layers.push_back(dense(spec.hidden, spec.embedding, std::sqrt(1.0 / spec.hidden)));
  } else {
    p.layers.push_back(dense(input_dim, spec.embedding, std::sqrt(1.0 / input_dim)));
  }
  p.activations.push_back(Activation::identity);
  if (n_classes > 0) p.head = dense(spec.embedding, n_classes, 0.01);
  return p;
}

inline EncoderParams identity_encoder(int dim) {
  EncoderParams p;
  p.layers.push_back({Matrix::Identity(dim, dim), Vector::Zero(dim)});
  p.activations.push_back(Activation::identity);
  return p;
}

/// Intermediate values kept for the backward pass.
struct ForwardPass {
  std::vector<Matrix> inputs;  // input to layer l
  std::vector<Matrix> pre;     // pre-activation of layer l
  Matrix raw;                  // last layer output before normalisation
  Vector norms;                // row norms of raw (normalised encoders only)
  Matrix output;
};

inline ForwardPass forward_pass(const EncoderParams& p, const Matrix& x) {
  require(!p.layers.empty(), "forward: encoder has no layers");
  require(x.cols() == p.layers.front().weight.cols(),
          "forward: input width " + std::to_string(x.cols()) + " does not match encoder input " +
              std::to_string(p.layers.front().weight.cols()));
  ForwardPass f;
  Matrix h = x;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    f.inputs.push_back(h);
    Matrix z = h * p.layers[l].weight.transpose();
    z.rowwise() += p.layers[l].bias.transpose();
    f.pre.push_back(z);
    h = p.activations[l] == Activation::relu ? Matrix(z.cwiseMax(0.0)) : z;
  }
  f.raw = h;
  if (p.normalize) {
    f.norms = h.rowwise().norm().cwiseMax(1e-12);
    f.output = h.array().colwise() / f.norms.array();
  } else {
    f.output = h;
  }
  return f;
}

inline Matrix forward(const EncoderParams& p, const Matrix& x) { return forward_pass(p, x).output; }

/// Gradient w.r.t. all encoder parameters given dLoss/dOutput. `head_grad` fills the head slot if present.
inline EncoderParams backward(const EncoderParams& p, const ForwardPass& f, Matrix d_out,
                              std::optional<Dense> head_grad = std::nullopt) {
  EncoderParams g = zeros_like(p);
  Matrix d = std::move(d_out);
  if (p.normalize) {
    // y = h/|h|  =>  dh = (dy - y (y . dy)) / |h|
    const Vector dots = (f.output.array() * d.array()).rowwise().sum();
    const Matrix tangent = d - (f.output.array().colwise() * dots.array()).matrix();
    d = (tangent.array().colwise() / f.norms.array()).matrix();
  }
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    if (p.activations[l] == Activation::relu) d = (f.pre[l].array() > 0.0).select(d.array(), 0.0).matrix();
    g.layers[l].weight = d.transpose() * f.inputs[l];
    g.layers[l].bias = d.colwise().sum().transpose();
    if (l > 0) d = d * p.layers[l].weight;
  }
  if (g.head && head_grad) g.head = std::move(head_grad);
  return g;
}

struct TrainConfig {
  double margin = 0.3;
  int P = 16;       // identities per batch
  int K_inst = 4;   // instances per identity
  double lr = 3e-4;
  int epochs = 1;
  std::uint64_t seed = 0;

  int batch_size() const { return P * K_inst; }

  void validate() const {
    require(margin >= 0.0, "train: margin must be >= 0");
    require(P >= 2, "train: P must be >= 2 (a batch needs negatives)");
    require(K_inst >= 2, "train: K_inst must be >= 2 (a batch needs positives)");
    require(lr > 0.0, "train: lr must be > 0");
    require(epochs >= 0, "train: epochs must be >= 0");
  }
};

struct BatchLossReport {
  double total_loss = 0.0;
  std::vector<double> per_anchor_losses;
};

/// Batch-hard mining result per anchor. An anchor without a positive or a
/// negative in the batch is marked invalid and contributes zero loss.
struct MinedTriplets {
  std::vector<long> positive;
  std::vector<long> negative;
  std::vector<double> d_ap;
  std::vector<double> d_an;
  std::vector<double> loss;
  std::vector<bool> valid;

  double total() const {
    double s = 0.0;
    for (double l : loss) s += l;
    return s;
  }
  std::size_t n_valid() const { return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), true)); }
};

inline void validate_pk_structure(std::span<const int> labels) {
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  require(counts.size() >= 2, "triplet: batch needs at least two distinct labels");
  for (auto [label, count] : counts)
    require(count >= 2, "triplet: label " + std::to_string(label) + " has a single instance in the batch");
}

/// Hardest positive (farthest, lowest index on ties) and hardest negative
/// (closest, lowest index on ties) per anchor under Euclidean distance.
inline MinedTriplets mine_batch_hard(const Matrix& emb, std::span<const int> labels, double margin) {
  require(static_cast<std::size_t>(emb.rows()) == labels.size(), "triplet: embedding/label count mismatch");
  const auto n = static_cast<std::size_t>(emb.rows());
  Matrix dist(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (emb.row(static_cast<Eigen::Index>(i)) - emb.row(static_cast<Eigen::Index>(j))).norm();
      dist(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
      dist(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
    }
  }
  MinedTriplets m;
  m.positive.assign(n, -1);
  m.negative.assign(n, -1);
  m.d_ap.assign(n, 0.0);
  m.d_an.assign(n, 0.0);
  m.loss.assign(n, 0.0);
  m.valid.assign(n, false);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t j = 0; j < n; ++j) {
      if (j == a) continue;
      const double v = dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(j));
      if (labels[j] == labels[a]) {
        if (m.positive[a] < 0 || v > m.d_ap[a]) {
          m.positive[a] = static_cast<long>(j);
          m.d_ap[a] = v;
        }
      } else if (m.negative[a] < 0 || v < m.d_an[a]) {
        m.negative[a] = static_cast<long>(j);
        m.d_an[a] = v;
      }
    }
    m.valid[a] = m.positive[a] >= 0 && m.negative[a] >= 0;
    if (m.valid[a]) m.loss[a] = std::max(0.0, m.d_ap[a] - m.d_an[a] + margin);
  }
  return m;
}

inline BatchLossReport triplet_loss_batch(const Matrix& emb, std::span<const int> labels, double margin) {
  validate_pk_structure(labels);
  const MinedTriplets m = mine_batch_hard(emb, labels, margin);
  return {m.total(), m.loss};
}

/// dLoss/dEmbedding of the summed hinge losses, mined indices held fixed.
inline Matrix triplet_embedding_grad(const Matrix& emb, const MinedTriplets& m) {
  Matrix g = Matrix::Zero(emb.rows(), emb.cols());
  for (std::size_t a = 0; a < m.loss.size(); ++a) {
    if (!m.valid[a] || m.loss[a] <= 0.0) continue;
    const auto ai = static_cast<Eigen::Index>(a);
    if (m.d_ap[a] > 0.0) {
      const auto p = static_cast<Eigen::Index>(m.positive[a]);
      const Eigen::RowVectorXd u = (emb.row(ai) - emb.row(p)) / m.d_ap[a];
      g.row(ai) += u;
      g.row(p) -= u;
    }
    if (m.d_an[a] > 0.0) {
      const auto q = static_cast<Eigen::Index>(m.negative[a]);
      const Eigen::RowVectorXd u = (emb.row(ai) - emb.row(q)) / m.d_an[a];
      g.row(ai) -= u;
      g.row(q) += u;
    }
  }
  return g;
}

struct TripletGrad {
  BatchLossReport report;
  EncoderParams grads;
  std::size_t valid_anchors = 0;
};

/// Loss and gradient of the summed batch-hard triplet loss. With `strict`
/// the batch must have PK structure; otherwise anchors lacking a positive or
/// negative are skipped.
inline TripletGrad triplet_grad(const EncoderParams& p, const Matrix& x, std::span<const int> labels, double margin,
                                bool strict = true) {
  if (strict) validate_pk_structure(labels);
  const ForwardPass f = forward_pass(p, x);
  const MinedTriplets m = mine_batch_hard(f.output, labels, margin);
  TripletGrad out;
  out.report = {m.total(), m.loss};
  out.valid_anchors = m.n_valid();
  std::optional<Dense> head_grad;
  if (p.head) head_grad = Dense{Matrix::Zero(p.head->weight.rows(), p.head->weight.cols()), Vector::Zero(p.head->bias.size())};
  out.grads = backward(p, f, triplet_embedding_grad(f.output, m), std::move(head_grad));
  return out;
}

struct CrossEntropyGrad {
  double loss = 0.0;
  EncoderParams grads;
};

/// Softmax cross-entropy of the classifier head, averaged over the batch.
inline CrossEntropyGrad ce_loss_and_grad(const EncoderParams& p, const Matrix& x, std::span<const int> labels) {
  require(p.head.has_value(), "cross-entropy: encoder has no classifier head");
  require(static_cast<std::size_t>(x.rows()) == labels.size() && !labels.empty(), "cross-entropy: batch/label mismatch");
  const auto n_classes = p.head->weight.rows();
  for (int l : labels) require(l >= 0 && l < n_classes, "cross-entropy: label outside the head's classes");

  const ForwardPass f = forward_pass(p, x);
  Matrix logits = f.output * p.head->weight.transpose();
  logits.rowwise() += p.head->bias.transpose();
  const auto batch = static_cast<double>(labels.size());
  Matrix d_logits(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double top = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - top).exp();
    const double z = e.sum();
    const int y = labels[static_cast<std::size_t>(i)];
    loss += -(logits(i, y) - top - std::log(z));
    d_logits.row(i) = e / z;
    d_logits(i, y) -= 1.0;
  }
  d_logits /= batch;
  Dense head_grad{d_logits.transpose() * f.output, d_logits.colwise().sum().transpose()};
  CrossEntropyGrad out;
  out.loss = loss / batch;
  out.grads = backward(p, f, d_logits * p.head->weight, std::move(head_grad));
  return out;
}

/// P distinct labels, K_inst instances each. Labels with fewer than K_inst
/// instances are drawn with replacement; negative labels are ignored.
/// Returns positions into `labels`, grouped by label.
inline std::vector<std::size_t> pk_sample(std::span<const int> labels, int P, int K_inst, Rng& rng) {
  require(P >= 1 && K_inst >= 1, "pk_sample: P and K_inst must be >= 1");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 0) members[labels[i]].push_back(i);
  if (members.size() < static_cast<std::size_t>(P)) {
    throw ConfigError("pk_sample: " + std::to_string(members.size()) + " identities available, " + std::to_string(P) +
                      " requested");
  }
  std::vector<int> ids;
  ids.reserve(members.size());
  for (const auto& kv : members) ids.push_back(kv.first);
  std::shuffle(ids.begin(), ids.end(), rng);
  ids.resize(static_cast<std::size_t>(P));

  std::vector<std::size_t> batch;
  batch.reserve(static_cast<std::size_t>(P * K_inst));
  for (int id : ids) {
    auto pool = members[id];
    if (pool.size() >= static_cast<std::size_t>(K_inst)) {
      std::shuffle(pool.begin(), pool.end(), rng);
      batch.insert(batch.end(), pool.begin(), pool.begin() + K_inst);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      for (int k = 0; k < K_inst; ++k) batch.push_back(pool[pick(rng)]);
    }
  }
  return batch;
}

struct AdamState {
  EncoderParams first_moment;
  EncoderParams second_moment;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState adam_init(const EncoderParams& p) { return {zeros_like(p), zeros_like(p)}; }

inline std::pair<AdamState, EncoderParams> opt_step(AdamState state, EncoderParams params, const EncoderParams& grads,
                                                    double lr) {
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;
  zip_tensors(
      [&](auto& w, auto& m, auto& v, const auto& g) {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      },
      params, state.first_moment, state.second_moment, grads);
  return {std::move(state), std::move(params)};
}

// ---- checkpoints -----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json dense_to_json(const Dense& d) {
  return {{"rows", d.weight.rows()},
          {"cols", d.weight.cols()},
          {"weight", std::vector<double>(d.weight.data(), d.weight.data() + d.weight.size())},
          {"bias", std::vector<double>(d.bias.data(), d.bias.data() + d.bias.size())}};
}

inline Dense dense_from_json(const nlohmann::json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto w = j.at("weight").get<std::vector<double>>();
  const auto b = j.at("bias").get<std::vector<double>>();
  require(static_cast<Eigen::Index>(w.size()) == rows * cols && static_cast<Eigen::Index>(b.size()) == rows,
          "checkpoint: tensor size mismatch");
  Dense d{Matrix(rows, cols), Vector(rows)};
  std::copy(w.begin(), w.end(), d.weight.data());
  std::copy(b.begin(), b.end(), d.bias.data());
  return d;
}

}  // namespace detail

inline nlohmann::json to_json(const EncoderParams& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto j = detail::dense_to_json(p.layers[l]);
    j["activation"] = p.activations[l] == Activation::relu ? "relu" : "identity";
    layers.push_back(std::move(j));
  }
  return {{"format", "act-encoder"},
          {"version", kCheckpointVersion},
          {"normalize", p.normalize},
          {"layers", std::move(layers)},
          {"head", p.head ? detail::dense_to_json(*p.head) : nlohmann::json(nullptr)}};
}

inline EncoderParams encoder_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "act-encoder", "checkpoint: not an encoder checkpoint");
  require(j.value("version", 0) == kCheckpointVersion, "checkpoint: unsupported version");
  EncoderParams p;
  p.normalize = j.at("normalize").get<bool>();
  for (const auto& layer : j.at("layers")) {
    p.layers.push_back(detail::dense_from_json(layer));
    const auto act = layer.at("activation").get<std::string>();
    require(act == "relu" || act == "identity", "checkpoint: unknown activation " + act);
    p.activations.push_back(act == "relu" ? Activation::relu : Activation::identity);
  }
  if (!j.at("head").is_null()) p.head = detail::dense_from_json(j.at("head"));
  p.validate();
  return p;
}

inline void save_checkpoint(const std::string& path, const EncoderParams& p) {
  std::ofstream os(path);
  if (!os) throw StageError("cannot write checkpoint " + path);
  os << to_json(p).dump() << '\n';
}

inline EncoderParams load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read checkpoint " + path);
  return encoder_from_json(nlohmann::json::parse(is));
}

}  // namespace act
