#pragma once

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "repprobe/cluster.hpp"
#include "repprobe/corpus.hpp"
#include "repprobe/csv.hpp"
#include "repprobe/errors.hpp"
#include "repprobe/matrix.hpp"
#include "repprobe/rng.hpp"

namespace repprobe {

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

/// Centers the rows and projects them on the top `dims` principal axes.
/// Each axis is sign-normalized so its largest-magnitude loading is positive.
inline Matrix<double> pca_reduce(const Matrix<double>& x, std::size_t dims) {
  const auto n = static_cast<Eigen::Index>(x.rows());
  const auto d = static_cast<Eigen::Index>(x.cols());
  Eigen::MatrixXd centered(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) centered(i, j) = x(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
  centered.rowwise() -= centered.colwise().mean();
  const Eigen::Index keep = std::min<Eigen::Index>(static_cast<Eigen::Index>(dims), d);
  Matrix<double> out(x.rows(), static_cast<std::size_t>(keep));
  if (keep == d) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = centered(i, j);
    return out;
  }
  Eigen::MatrixXd cov = centered.transpose() * centered;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // Eigenvalues come in ascending order.
  Eigen::MatrixXd axes = eig.eigenvectors().rightCols(keep).rowwise().reverse();
  for (Eigen::Index c = 0; c < keep; ++c) {
    Eigen::Index arg;
    axes.col(c).cwiseAbs().maxCoeff(&arg);
    if (axes(arg, c) < 0) axes.col(c) *= -1.0;
  }
  Eigen::MatrixXd proj = centered * axes;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < keep; ++j) out(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = proj(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Exact t-SNE
// ---------------------------------------------------------------------------

struct TsneConfig {
  double perplexity = 30.0;
  std::size_t iters = 1000;
  std::uint64_t seed = 0;
  bool pca = true;
  std::size_t pca_dims = 50;
  double early_exaggeration = 12.0;
  std::size_t exaggeration_iters = 250;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  /// 0 selects max(N / 12, 50).
  double learning_rate = 0.0;
  /// Bandwidth search tolerance on the entropy (nats) of each conditional row.
  double perplexity_tol = 1e-5;
};

struct Projection {
  Matrix<double> coords;            // N x 2
  std::vector<double> kl_history;   // KL(P || Q) after every iteration, unexaggerated P
  double perplexity = 0.0;          // value actually used
  std::size_t iters = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

struct ConditionalAffinities {
  Matrix<double> p;                        // row-stochastic, zero diagonal
  std::vector<double> achieved_perplexity;  // exp(entropy) of each row
};

/// Per-row Gaussian bandwidths found by bisection on the precision so each
/// conditional distribution hits the target perplexity.
inline ConditionalAffinities conditional_affinities(const Matrix<double>& sq_dist, double perplexity,
                                                    double tol = 1e-5, std::size_t max_steps = 200) {
  const std::size_t n = sq_dist.rows();
  const double target = std::log(perplexity);
  ConditionalAffinities out{Matrix<double>(n, n, 0.0), std::vector<double>(n, 0.0)};
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    double entropy = 0.0;
    // Shifting by the nearest distance keeps exp() away from underflow.
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, sq_dist(i, j));
    for (std::size_t step = 0; step < max_steps; ++step) {
      double sum = 0.0, weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) {
          row[j] = 0.0;
          continue;
        }
        const double dj = sq_dist(i, j) - dmin;
        row[j] = std::exp(-beta * dj);
        sum += row[j];
        weighted += dj * row[j];
      }
      entropy = std::log(sum) + beta * weighted / sum;
      for (auto& v : row) v /= sum;
      const double diff = entropy - target;
      if (std::abs(diff) < tol) break;
      if (diff > 0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    std::ranges::copy(row, out.p.row(i).begin());
    out.achieved_perplexity[i] = std::exp(entropy);
  }
  return out;
}

namespace detail {

inline Matrix<double> pairwise_sq_dist(const Matrix<double>& x) {
  const std::size_t n = x.rows();
  Matrix<double> d(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = squared_distance(x.row(i), x.row(j));
  return d;
}

inline constexpr double kTsneFloor = 1e-12;

/// KL(P || Q) for embedding y and the gradient for exaggerated P (alpha * P).
inline double tsne_kl_and_grad(const Matrix<double>& p, const Matrix<double>& y, double alpha, Matrix<double>& grad,
                               Matrix<double>& num) {
  const std::size_t n = y.rows();
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    num(i, i) = 0.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y(i, 0) - y(j, 0), dy = y(i, 1) - y(j, 1);
      const double q = 1.0 / (1.0 + dx * dx + dy * dy);
      num(i, j) = num(j, i) = q;
      z += 2.0 * q;
    }
  }
  double kl = 0.0;
  grad.fill(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double q = std::max(num(i, j) / z, kTsneFloor);
      const double pij = p(i, j);
      if (pij > 0.0) kl += pij * std::log(pij / q);
      const double mult = 4.0 * (alpha * pij - q) * num(i, j);
      grad(i, 0) += mult * (y(i, 0) - y(j, 0));
      grad(i, 1) += mult * (y(i, 1) - y(j, 1));
    }
  }
  return std::max(kl, 0.0);
}

}  // namespace detail

/// Exact O(N^2) t-SNE to two dimensions: optional PCA pre-reduction,
/// perplexity-calibrated symmetric affinities, early exaggeration, momentum
/// gradient descent. After the exaggeration phase a step that would raise
/// the KL divergence is retried without momentum at half the step size.
inline Projection tsne_project(const Matrix<double>& x, const TsneConfig& cfg = {}) {
  const std::size_t n = x.rows();
  if (n < 3) throw ConfigError("t-SNE needs at least 3 rows, got " + std::to_string(n));
  if (!(cfg.perplexity > 0.0)) throw ConfigError("perplexity must be positive");
  if (cfg.iters < 1) throw ConfigError("iterations must be at least 1");
  if (!all_finite(x.flat())) throw ValueError("t-SNE input contains non-finite values");

  Projection out;
  out.iters = cfg.iters;
  out.seed = cfg.seed;
  out.perplexity = cfg.perplexity;
  if (static_cast<double>(n) < 3.0 * cfg.perplexity) {
    out.perplexity = std::max(1.0, std::floor(static_cast<double>(n - 1) / 3.0));
    out.warnings.push_back("perplexity " + std::to_string(cfg.perplexity) + " too large for N=" + std::to_string(n) +
                           "; using " + std::to_string(out.perplexity));
  }

  const Matrix<double> reduced = cfg.pca && x.cols() > cfg.pca_dims ? pca_reduce(x, cfg.pca_dims) : x;
  const auto cond = conditional_affinities(detail::pairwise_sq_dist(reduced), out.perplexity, cfg.perplexity_tol);
  Matrix<double> p(n, n, 0.0);
  const double norm = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) p(i, j) = std::max((cond.p(i, j) + cond.p(j, i)) / norm, detail::kTsneFloor);

  Rng rng(cfg.seed);
  Matrix<double> y(n, 2), v(n, 2, 0.0), grad(n, 2), num(n, n), y_try(n, 2), grad_try(n, 2);
  for (auto& c : y.flat()) c = 1e-4 * rng.normal();
  const double lr = cfg.learning_rate > 0.0 ? cfg.learning_rate : std::max(static_cast<double>(n) / 12.0, 50.0);

  auto center = [n](Matrix<double>& m) {
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += m(i, c);
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) m(i, c) -= mean;
    }
  };

  const bool exaggerate_first = cfg.exaggeration_iters > 0;
  double kl = detail::tsne_kl_and_grad(p, y, exaggerate_first ? cfg.early_exaggeration : 1.0, grad, num);
  out.kl_history.reserve(cfg.iters);
  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const bool exaggerated = it < cfg.exaggeration_iters;
    const double momentum = exaggerated ? cfg.initial_momentum : cfg.final_momentum;
    const double next_alpha = it + 1 < cfg.exaggeration_iters ? cfg.early_exaggeration : 1.0;

    double step = lr, mom = momentum;
    for (int attempt = 0;; ++attempt) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 2; ++c) {
          const double vc = mom * v(i, c) - step * grad(i, c);
          y_try(i, c) = y(i, c) + vc;
        }
      center(y_try);
      const double kl_try = detail::tsne_kl_and_grad(p, y_try, next_alpha, grad_try, num);
      if (exaggerated || kl_try <= kl) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t c = 0; c < 2; ++c) v(i, c) = mom * v(i, c) - step * grad(i, c);
        std::swap(y, y_try);
        std::swap(grad, grad_try);
        kl = kl_try;
        break;
      }
      if (attempt >= 40) {
        // No descent direction left at this precision: stay put.
        v.fill(0.0);
        break;
      }
      mom = 0.0;
      step *= 0.5;
    }
    out.kl_history.push_back(kl);
  }
  out.coords = std::move(y);
  return out;
}

inline Projection tsne_project(const EmbeddingMatrix& emb, const TsneConfig& cfg = {}) {
  return tsne_project(emb.values(), cfg);
}

// ---------------------------------------------------------------------------
// Exemplars
// ---------------------------------------------------------------------------

enum class ExemplarMode { random, nearest_centroid };

inline ExemplarMode parse_exemplar_mode(std::string_view s) {
  if (s == "random") return ExemplarMode::random;
  if (s == "nearest_centroid") return ExemplarMode::nearest_centroid;
  throw ConfigError("unknown exemplar mode '" + std::string(s) + "'");
}

struct ExemplarConfig {
  std::size_t clusters_to_show = 5;
  std::size_t samples_per_cluster = 5;
  ExemplarMode mode = ExemplarMode::random;
  std::uint64_t seed = 0;
};

struct ExemplarBlock {
  std::size_t cluster_id = 0;  // model component index
  std::vector<std::string> ids;
  std::vector<std::string> texts;
};

/// Picks distinct non-empty clusters uniformly at random and lists members
/// of each: a random sample, or those closest to the cluster center.
/// `data` supplies the rows the clustering was fit on (needed for
/// nearest_centroid mode); `row_ids` names them.
inline std::vector<ExemplarBlock> exemplars(const ClusterResult& result, const Matrix<double>& data,
                                            std::span<const std::string> row_ids,
                                            const std::unordered_map<std::string, std::string>& texts,
                                            const ExemplarConfig& cfg = {}) {
  if (row_ids.size() != result.labels.size() || data.rows() != result.labels.size())
    throw ShapeError("clustering, data and ids disagree on the row count");
  const std::size_t k = result.k();
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < result.labels.size(); ++i) members[result.labels[i]].push_back(i);
  std::vector<std::size_t> non_empty;
  for (std::size_t c = 0; c < k; ++c)
    if (!members[c].empty()) non_empty.push_back(c);

  Rng rng(cfg.seed);
  rng.shuffle(non_empty.begin(), non_empty.end());
  non_empty.resize(std::min(non_empty.size(), cfg.clusters_to_show));
  std::ranges::sort(non_empty);

  std::vector<ExemplarBlock> out;
  for (auto c : non_empty) {
    auto pool = members[c];
    if (cfg.mode == ExemplarMode::random) {
      rng.shuffle(pool.begin(), pool.end());
    } else {
      const auto center = result.centers().row(c);
      std::ranges::stable_sort(pool, [&](std::size_t a, std::size_t b) {
        return squared_distance(data.row(a), center) < squared_distance(data.row(b), center);
      });
    }
    pool.resize(std::min(pool.size(), cfg.samples_per_cluster));
    ExemplarBlock block{c, {}, {}};
    for (auto i : pool) {
      auto it = texts.find(row_ids[i]);
      if (it == texts.end()) throw LookupError("no text for id '" + row_ids[i] + "'");
      block.ids.push_back(row_ids[i]);
      block.texts.push_back(it->second);
    }
    out.push_back(std::move(block));
  }
  return out;
}

/// One block per cluster: a "cluster <id>" header line, then one utterance
/// per line; blocks separated by a blank line.
inline std::string format_exemplars(const std::vector<ExemplarBlock>& blocks) {
  std::string out;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (b) out += '\n';
    out += "cluster " + std::to_string(blocks[b].cluster_id) + '\n';
    for (const auto& t : blocks[b].texts) out += t + '\n';
  }
  return out;
}

/// `id,x,y,label` rows for plotting.
inline std::string format_projection(const Projection& proj, std::span<const std::string> ids,
                                     std::span<const std::string> labels) {
  if (ids.size() != proj.coords.rows() || (!labels.empty() && labels.size() != ids.size()))
    throw ShapeError("projection, ids and labels disagree on the row count");
  std::string out = "id,x,y,label\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += csv_field(ids[i]);
    for (std::size_t c = 0; c < 2; ++c) out += ',' + format_number(proj.coords(i, c));
    out += ',' + (labels.empty() ? std::string() : csv_field(labels[i])) + '\n';
  }
  return out;
}

}  // namespace repprobe
