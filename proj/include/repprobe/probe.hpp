#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "repprobe/binary_io.hpp"
#include "repprobe/corpus.hpp"
#include "repprobe/errors.hpp"
#include "repprobe/matrix.hpp"
#include "repprobe/rng.hpp"

// Linear classifier probe over frozen embeddings: one C x d linear map
// followed by a softmax (single-label) or element-wise sigmoid (multi-label)
// head, trained with AdamW and global-norm gradient clipping.

namespace repprobe {

enum class Head : std::uint8_t { softmax = 0, sigmoid = 1 };

inline const char* to_string(Head h) { return h == Head::softmax ? "softmax" : "sigmoid"; }

template <std::floating_point Real = double>
struct ProbeModel {
  Head head = Head::softmax;
  Matrix<Real> weights;  // C x d
  std::vector<Real> bias;

  std::size_t n_classes() const noexcept { return weights.rows(); }
  std::size_t dim() const noexcept { return weights.cols(); }

  static ProbeModel zeros(Head head, std::size_t n_classes, std::size_t dim) {
    return {head, Matrix<Real>(n_classes, dim, Real{0}), std::vector<Real>(n_classes, Real{0})};
  }

  bool operator==(const ProbeModel&) const = default;
};

struct TrainConfig {
  double learning_rate = 5e-5;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 30;
  /// Non-improving validation epochs tolerated before stopping; 0 disables early stopping.
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  /// Sigmoid decision threshold.
  double threshold = 0.5;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  }
};

/// Single-label targets: one class index per row.
struct ClassTargets {
  std::vector<std::size_t> labels;
  std::size_t n_classes = 0;
};

/// Multi-label targets: N x C 0/1 indicators.
struct MultiLabelTargets {
  Matrix<std::uint8_t> indicators;
};

using ProbeTargets = std::variant<ClassTargets, MultiLabelTargets>;

inline Head head_for(const ProbeTargets& t) {
  return std::holds_alternative<ClassTargets>(t) ? Head::softmax : Head::sigmoid;
}

inline std::size_t target_rows(const ProbeTargets& t) {
  return std::visit(
      [](const auto& v) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, ClassTargets>) return v.labels.size();
        else return v.indicators.rows();
      },
      t);
}

inline std::size_t target_classes(const ProbeTargets& t) {
  return std::visit(
      [](const auto& v) -> std::size_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, ClassTargets>) return v.n_classes;
        else return v.indicators.cols();
      },
      t);
}

struct ProbeMetrics {
  std::optional<double> accuracy;  // softmax head
  std::optional<double> micro_f1;  // sigmoid head
  double loss = 0.0;               // mean per-example loss

  double primary() const { return accuracy ? *accuracy : micro_f1.value_or(0.0); }
};

/// F1 over globally aggregated counts; 1 when there is nothing to find and nothing was predicted.
inline double micro_f1(std::uint64_t tp, std::uint64_t fp, std::uint64_t fn) {
  const std::uint64_t den = 2 * tp + fp + fn;
  return den == 0 ? 1.0 : static_cast<double>(2 * tp) / static_cast<double>(den);
}

template <std::floating_point Real>
struct Gradients {
  Matrix<Real> weights;
  std::vector<Real> bias;

  static Gradients like(const ProbeModel<Real>& m) {
    return {Matrix<Real>(m.n_classes(), m.dim(), Real{0}), std::vector<Real>(m.n_classes(), Real{0})};
  }

  /// L2 norm, scaled by the largest entry so huge gradients do not overflow.
  double norm() const {
    double top = 0.0;
    for (Real g : weights.flat()) top = std::max(top, std::abs(static_cast<double>(g)));
    for (Real g : bias) top = std::max(top, std::abs(static_cast<double>(g)));
    if (top == 0.0 || !std::isfinite(top)) return top;
    double s = 0.0;
    for (Real g : weights.flat()) s += (static_cast<double>(g) / top) * (static_cast<double>(g) / top);
    for (Real g : bias) s += (static_cast<double>(g) / top) * (static_cast<double>(g) / top);
    return top * std::sqrt(s);
  }
};

/// Scales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
template <std::floating_point Real>
double clip_global_norm(Gradients<Real>& g, double max_norm) {
  const double norm = g.norm();
  if (norm > max_norm) {
    const auto scale = static_cast<Real>(max_norm / (norm + 1e-6));
    for (auto& v : g.weights.flat()) v *= scale;
    for (auto& v : g.bias) v *= scale;
  }
  return norm;
}

/// Decoupled-weight-decay Adam.
template <std::floating_point Real>
class AdamW {
 public:
  explicit AdamW(const ProbeModel<Real>& model)
      : m_(Gradients<Real>::like(model)), v_(Gradients<Real>::like(model)) {}

  void step(ProbeModel<Real>& model, const Gradients<Real>& g, const TrainConfig& cfg) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    auto update = [&](std::span<Real> theta, std::span<const Real> grad, std::span<Real> m, std::span<Real> v) {
      for (std::size_t i = 0; i < theta.size(); ++i) {
        const double gi = grad[i];
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<Real>(mi);
        v[i] = static_cast<Real>(vi);
        const double m_hat = mi / bc1;
        const double v_hat = vi / bc2;
        const double th = theta[i];
        theta[i] = static_cast<Real>(th - cfg.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * th));
      }
    };
    update(model.weights.flat(), g.weights.flat(), m_.weights.flat(), v_.weights.flat());
    update(model.bias, g.bias, m_.bias, v_.bias);
  }

  std::uint64_t steps() const noexcept { return t_; }

 private:
  Gradients<Real> m_, v_;
  std::uint64_t t_ = 0;
};

namespace detail {

template <std::floating_point Real>
void logits_row(const ProbeModel<Real>& model, std::span<const Real> x, std::span<Real> out) {
  for (std::size_t c = 0; c < model.n_classes(); ++c) {
    Real acc = model.bias[c];
    auto w = model.weights.row(c);
    for (std::size_t j = 0; j < x.size(); ++j) acc += w[j] * x[j];
    out[c] = acc;
  }
}

template <std::floating_point Real>
void softmax_inplace(std::span<Real> z) {
  const Real m = *std::ranges::max_element(z);
  Real s{0};
  for (auto& v : z) {
    v = std::exp(v - m);
    s += v;
  }
  for (auto& v : z) v /= s;
}

template <std::floating_point Real>
Real sigmoid(Real z) {
  if (z >= 0) return Real{1} / (Real{1} + std::exp(-z));
  const Real e = std::exp(z);
  return e / (Real{1} + e);
}

/// max(z, 0) - y z + log(1 + exp(-|z|)), the stable binary cross-entropy on a logit.
template <std::floating_point Real>
double bce_logit(Real z, bool y) {
  const double zd = z;
  return std::max(zd, 0.0) - (y ? zd : 0.0) + std::log1p(std::exp(-std::abs(zd)));
}

inline void check_dims(std::size_t model_dim, std::size_t data_dim) {
  if (model_dim != data_dim)
    throw ShapeError("embedding dimension " + std::to_string(data_dim) + " does not match probe dimension " +
                     std::to_string(model_dim));
}

template <std::floating_point Real>
void check_targets(const ProbeModel<Real>& model, std::size_t rows, const ProbeTargets& t) {
  if (head_for(t) != model.head) throw ShapeError("target kind does not match the probe head");
  if (target_rows(t) != rows)
    throw ShapeError("target rows " + std::to_string(target_rows(t)) + " do not match data rows " + std::to_string(rows));
  if (target_classes(t) != model.n_classes())
    throw ShapeError("target classes " + std::to_string(target_classes(t)) + " do not match probe classes " +
                     std::to_string(model.n_classes()));
  if (const auto* ct = std::get_if<ClassTargets>(&t))
    for (auto y : ct->labels)
      if (y >= ct->n_classes) throw ShapeError("class index " + std::to_string(y) + " out of range");
}

}  // namespace detail

/// Class probabilities (softmax rows) or independent label probabilities (sigmoid).
template <std::floating_point Real>
Matrix<Real> forward(const ProbeModel<Real>& model, const Matrix<Real>& x) {
  detail::check_dims(model.dim(), x.cols());
  Matrix<Real> out(x.rows(), model.n_classes());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = out.row(i);
    detail::logits_row(model, x.row(i), row);
    if (model.head == Head::softmax) {
      detail::softmax_inplace(row);
    } else {
      for (auto& v : row) v = detail::sigmoid(v);
    }
  }
  return out;
}

template <std::floating_point Real>
Matrix<Real> forward(const ProbeModel<Real>& model, const EmbeddingMatrix& emb) {
  detail::check_dims(model.dim(), emb.dim());
  return forward(model, emb.values().template cast<Real>());
}

/// Mean loss over `rows` and its gradient with respect to all parameters.
/// Softmax: cross-entropy. Sigmoid: binary cross-entropy summed over classes.
template <std::floating_point Real>
double loss_and_gradient(const ProbeModel<Real>& model, const Matrix<Real>& x, const ProbeTargets& targets,
                         std::span<const std::size_t> rows, Gradients<Real>& grad) {
  const std::size_t c_count = model.n_classes();
  grad = Gradients<Real>::like(model);
  std::vector<Real> z(c_count);
  double loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r : rows) {
    auto xr = x.row(r);
    detail::logits_row(model, xr, std::span<Real>(z));
    if (model.head == Head::softmax) {
      const std::size_t y = std::get<ClassTargets>(targets).labels[r];
      const Real m = *std::ranges::max_element(z);
      double s = 0.0;
      for (Real v : z) s += std::exp(static_cast<double>(v - m));
      loss += static_cast<double>(m) + std::log(s) - static_cast<double>(z[y]);
      detail::softmax_inplace(std::span<Real>(z));
      z[y] -= Real{1};
    } else {
      const auto& ind = std::get<MultiLabelTargets>(targets).indicators;
      for (std::size_t c = 0; c < c_count; ++c) {
        const bool y = ind(r, c) != 0;
        loss += detail::bce_logit(z[c], y);
        z[c] = detail::sigmoid(z[c]) - (y ? Real{1} : Real{0});
      }
    }
    // z now holds dLoss/dlogit for this example.
    for (std::size_t c = 0; c < c_count; ++c) {
      const Real dz = static_cast<Real>(z[c] * inv_b);
      grad.bias[c] += dz;
      auto gw = grad.weights.row(c);
      for (std::size_t j = 0; j < xr.size(); ++j) gw[j] += dz * xr[j];
    }
  }
  return loss * inv_b;
}

template <std::floating_point Real>
ProbeMetrics evaluate_probe(const ProbeModel<Real>& model, const Matrix<Real>& x, const ProbeTargets& targets,
                            double threshold = 0.5) {
  detail::check_dims(model.dim(), x.cols());
  detail::check_targets(model, x.rows(), targets);
  if (x.rows() == 0) throw EmptyError("cannot evaluate a probe on zero rows");
  ProbeMetrics out;
  const auto probs = forward(model, x);
  std::vector<std::size_t> all(x.rows());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto scratch = Gradients<Real>::like(model);
  out.loss = loss_and_gradient(model, x, targets, all, scratch);
  if (model.head == Head::softmax) {
    const auto& labels = std::get<ClassTargets>(targets).labels;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto p = probs.row(i);
      hits += static_cast<std::size_t>(std::ranges::max_element(p) - p.begin()) == labels[i];
    }
    out.accuracy = static_cast<double>(hits) / static_cast<double>(x.rows());
  } else {
    const auto& ind = std::get<MultiLabelTargets>(targets).indicators;
    std::uint64_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t c = 0; c < model.n_classes(); ++c) {
        const bool pred = probs(i, c) >= threshold;
        const bool truth = ind(i, c) != 0;
        tp += pred && truth;
        fp += pred && !truth;
        fn += !pred && truth;
      }
    out.micro_f1 = micro_f1(tp, fp, fn);
  }
  return out;
}

template <std::floating_point Real>
ProbeMetrics evaluate_probe(const ProbeModel<Real>& model, const EmbeddingMatrix& emb, const ProbeTargets& targets,
                            double threshold = 0.5) {
  detail::check_dims(model.dim(), emb.dim());
  return evaluate_probe(model, emb.values().template cast<Real>(), targets, threshold);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean over the epoch's mini-batches
  ProbeMetrics valid;
};

template <std::floating_point Real>
struct TrainOutcome {
  ProbeModel<Real> model;  // best-validation parameters
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

/// Mini-batch AdamW from zero-initialized parameters with per-epoch
/// validation; keeps the best-validation model and stops after `patience`
/// epochs without improvement.
template <std::floating_point Real = double>
TrainOutcome<Real> train_probe(const Matrix<Real>& train_x, const ProbeTargets& train_y, const Matrix<Real>& valid_x,
                               const ProbeTargets& valid_y, const TrainConfig& cfg) {
  cfg.validate();
  if (train_x.rows() == 0 || valid_x.rows() == 0) throw EmptyError("train and valid splits need at least one example");
  if (train_x.cols() != valid_x.cols()) throw ShapeError("train and valid embedding dimensions differ");
  if (target_classes(train_y) != target_classes(valid_y) || head_for(train_y) != head_for(valid_y))
    throw ShapeError("train and valid targets disagree on the label space");
  if (target_classes(train_y) == 0) throw EmptyError("no target classes");

  auto model = ProbeModel<Real>::zeros(head_for(train_y), target_classes(train_y), train_x.cols());
  detail::check_targets(model, train_x.rows(), train_y);
  detail::check_targets(model, valid_x.rows(), valid_y);

  AdamW<Real> opt(model);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train_x.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto grad = Gradients<Real>::like(model);

  TrainOutcome<Real> out;
  out.model = model;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double loss = loss_and_gradient(model, train_x, train_y, std::span(order).subspan(start, end - start), grad);
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch));
      clip_global_norm(grad, cfg.clip_norm);
      opt.step(model, grad, cfg);
      loss_sum += loss;
      ++batches;
    }
    if (!all_finite(model.weights.flat()) || !all_finite(std::span<const Real>(model.bias)))
      throw DivergenceError("non-finite probe parameters at epoch " + std::to_string(epoch));
    EpochRecord rec{epoch, loss_sum / static_cast<double>(batches), evaluate_probe(model, valid_x, valid_y, cfg.threshold)};
    out.history.push_back(rec);
    if (rec.valid.primary() > best_metric) {
      best_metric = rec.valid.primary();
      out.model = model;
      out.best_epoch = epoch;
      stale = 0;
    } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
      break;
    }
  }
  return out;
}

template <std::floating_point Real = double>
TrainOutcome<Real> train_probe(const EmbeddingMatrix& train, const ProbeTargets& train_y, const EmbeddingMatrix& valid,
                               const ProbeTargets& valid_y, const TrainConfig& cfg) {
  return train_probe<Real>(train.values().template cast<Real>(), train_y, valid.values().template cast<Real>(), valid_y,
                           cfg);
}

// Serialized layout: "PRB1", head byte, u32 C, u32 d, C*d float64 weights
// (row-major), C float64 biases; little-endian throughout.

template <std::floating_point Real>
void write_probe(std::ostream& out, const ProbeModel<Real>& model) {
  out.write("PRB1", 4);
  out.put(static_cast<char>(model.head));
  binary::put_u32(out, static_cast<std::uint32_t>(model.n_classes()));
  binary::put_u32(out, static_cast<std::uint32_t>(model.dim()));
  for (Real w : model.weights.flat()) binary::put_f64(out, static_cast<double>(w));
  for (Real b : model.bias) binary::put_f64(out, static_cast<double>(b));
}

template <std::floating_point Real>
void save_probe(const std::filesystem::path& path, const ProbeModel<Real>& model) {
  detail::write_file_atomic(path, [&](std::ostream& out) { write_probe(out, model); });
}

inline ProbeModel<double> parse_probe(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 4 || bytes.substr(0, 4) != "PRB1") throw FormatError("bad magic: expected \"PRB1\"");
  if (bytes.size() < 13) throw TruncatedError("probe header shorter than 13 bytes");
  if (p[4] > 1) throw FormatError("unknown head tag " + std::to_string(p[4]));
  const Head head = static_cast<Head>(p[4]);
  const std::uint64_t c = binary::decode_u32(p + 5);
  const std::uint64_t d = binary::decode_u32(p + 9);
  if (c == 0 || d == 0) throw EmptyError("probe declares C=" + std::to_string(c) + ", d=" + std::to_string(d));
  const std::uint64_t expected = 13 + 8 * (c * d + c);
  if (bytes.size() < expected) throw TruncatedError("probe payload truncated");
  if (bytes.size() > expected) throw FormatError("trailing bytes after probe payload");
  auto model = ProbeModel<double>::zeros(head, c, d);
  for (std::uint64_t i = 0; i < c * d; ++i) model.weights.flat()[i] = binary::decode_f64(p + 13 + 8 * i);
  for (std::uint64_t i = 0; i < c; ++i) model.bias[i] = binary::decode_f64(p + 13 + 8 * (c * d + i));
  return model;
}

inline ProbeModel<double> load_probe(const std::filesystem::path& path) { return parse_probe(detail::read_file(path)); }

// ---------------------------------------------------------------------------
// Targets from label tables
// ---------------------------------------------------------------------------

/// Class vocabulary for a field across several label tables: single-label
/// fields map tokens, multi-label fields map individual tokens (multi-hot).
/// Order is first occurrence across the tables in the given order.
inline std::vector<std::string> field_vocabulary(std::span<const LabelTable* const> tables, std::string_view field) {
  std::vector<std::string> vocab;
  std::unordered_set<std::string> seen;
  for (const auto* t : tables)
    for (const auto& row : t->rows())
      for (const auto& tok : row.fields.find(field)->second)
        if (seen.insert(tok).second) vocab.push_back(tok);
  return vocab;
}

inline ProbeTargets make_targets(const LabelTable& labels, std::string_view field, std::span<const std::string> vocab) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < vocab.size(); ++i) index.emplace(vocab[i], i);
  auto lookup = [&](const std::string& tok) {
    auto it = index.find(tok);
    if (it == index.end()) throw LookupError("label '" + tok + "' missing from the class vocabulary");
    return it->second;
  };
  if (labels.kind(field) == FieldKind::single) {
    ClassTargets t{{}, vocab.size()};
    for (const auto& row : labels.rows()) t.labels.push_back(lookup(row.fields.find(field)->second.front()));
    return t;
  }
  MultiLabelTargets t{Matrix<std::uint8_t>(labels.size(), vocab.size(), 0)};
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (const auto& tok : labels.rows()[i].fields.find(field)->second) t.indicators(i, lookup(tok)) = 1;
  return t;
}

}  // namespace repprobe
