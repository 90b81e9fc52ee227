#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "repprobe/corpus.hpp"
#include "repprobe/errors.hpp"
#include "repprobe/matrix.hpp"
#include "repprobe/parallel.hpp"
#include "repprobe/rng.hpp"

namespace repprobe {

inline constexpr std::size_t kDefaultRestarts = 10;
inline constexpr std::size_t kDefaultMaxIters = 50;

enum class Algorithm { kmeans, gmm };
enum class CovMode { diag, full, spherical };

inline const char* to_string(Algorithm a) { return a == Algorithm::kmeans ? "kmeans" : "gmm"; }
inline const char* to_string(CovMode m) {
  switch (m) {
    case CovMode::full: return "full";
    case CovMode::spherical: return "spherical";
    default: return "diag";
  }
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "kmeans") return Algorithm::kmeans;
  if (s == "gmm") return Algorithm::gmm;
  throw ConfigError("unknown clusterer '" + std::string(s) + "' (expected kmeans or gmm)");
}

inline CovMode parse_cov_mode(std::string_view s) {
  if (s == "diag") return CovMode::diag;
  if (s == "full") return CovMode::full;
  if (s == "spherical") return CovMode::spherical;
  throw ConfigError("unknown covariance mode '" + std::string(s) + "'");
}

struct KMeansModel {
  Matrix<double> centroids;  // k x d
  std::size_t k = 0;
  double objective = 0.0;    // within-cluster sum of squares
  std::size_t iters_run = 0;
  /// Assignment cost after each Lloyd assignment step.
  std::vector<double> objective_history;
};

struct GmmModel {
  std::vector<double> weights;
  Matrix<double> means;      // k x d
  Matrix<double> variances;  // k x d; the diagonal in full mode
  std::vector<Matrix<double>> full_covariances;  // k of d x d, full mode only
  CovMode cov_mode = CovMode::diag;
  double log_likelihood = 0.0;
  std::size_t iters_run = 0;
  /// Total data log-likelihood after the initial M-step and after every EM iteration.
  std::vector<double> log_likelihood_history;
};

struct GmmOptions {
  CovMode cov_mode = CovMode::diag;
  double reg_floor = 1e-6;
  /// Stop once |delta log-likelihood| / N falls below this.
  double tol = 1e-6;
};

struct ClusterResult {
  Partition partition;               // compacted; class names are model component ids
  std::vector<std::size_t> labels;   // raw model component per row
  std::variant<KMeansModel, GmmModel> model;
  std::uint64_t seed = 0;
  double fit_score = 0.0;            // WCSS (kmeans) or log-likelihood (gmm)

  Algorithm algorithm() const { return std::holds_alternative<KMeansModel>(model) ? Algorithm::kmeans : Algorithm::gmm; }
  std::size_t k() const {
    return algorithm() == Algorithm::kmeans ? std::get<KMeansModel>(model).k : std::get<GmmModel>(model).weights.size();
  }
  /// Centroids or component means.
  const Matrix<double>& centers() const {
    return algorithm() == Algorithm::kmeans ? std::get<KMeansModel>(model).centroids : std::get<GmmModel>(model).means;
  }
};

namespace detail {

inline void check_fit_inputs(const Matrix<double>& data, std::size_t k, std::size_t max_iters) {
  if (data.rows() == 0 || data.cols() == 0) throw EmptyError("cannot cluster an empty matrix");
  if (k < 1) throw ConfigError("k must be at least 1");
  if (k > data.rows())
    throw ConfigError("k=" + std::to_string(k) + " exceeds the number of rows N=" + std::to_string(data.rows()));
  if (max_iters < 1) throw ConfigError("max_iters must be at least 1");
  if (!all_finite(data.flat())) throw ValueError("clustering input contains non-finite values");
}

/// k-means++ seeding: first center uniform, then D^2 sampling.
inline Matrix<double> kmeans_plus_plus(const Matrix<double>& data, std::size_t k, Rng& rng) {
  const std::size_t n = data.rows();
  Matrix<double> centers(k, data.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::vector<char> chosen(n, 0);
  std::size_t pick = rng.below(n);
  for (std::size_t c = 0; c < k; ++c) {
    if (c > 0) {
      double total = 0.0;
      for (double v : d2) total += v;
      if (total > 0.0) {
        const double target = rng.uniform() * total;
        double acc = 0.0;
        pick = n;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < n; ++i) {
          if (d2[i] <= 0.0) continue;
          last_positive = i;
          acc += d2[i];
          if (acc > target) {
            pick = i;
            break;
          }
        }
        if (pick == n) pick = last_positive;
      } else {
        // All remaining mass is zero (duplicated points): pick an unchosen row.
        std::vector<std::size_t> free;
        for (std::size_t i = 0; i < n; ++i)
          if (!chosen[i]) free.push_back(i);
        pick = free[rng.below(free.size())];
      }
    }
    chosen[pick] = 1;
    std::ranges::copy(data.row(pick), centers.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(data.row(i), centers.row(c)));
  }
  return centers;
}

inline void update_centroids(const Matrix<double>& data, std::span<const std::size_t> labels, Matrix<double>& centers) {
  const std::size_t d = data.cols();
  std::vector<std::size_t> counts(centers.rows(), 0);
  Matrix<double> sums(centers.rows(), d, 0.0);
  for (std::size_t i = 0; i < data.rows(); ++i) {
    auto s = sums.row(labels[i]);
    auto x = data.row(i);
    for (std::size_t j = 0; j < d; ++j) s[j] += x[j];
    ++counts[labels[i]];
  }
  for (std::size_t c = 0; c < centers.rows(); ++c) {
    if (counts[c] == 0) continue;
    const double inv = 1.0 / static_cast<double>(counts[c]);
    auto dst = centers.row(c);
    auto s = sums.row(c);
    for (std::size_t j = 0; j < d; ++j) dst[j] = s[j] * inv;
  }
}

inline double wcss(const Matrix<double>& data, std::span<const std::size_t> labels, const Matrix<double>& centers) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.rows(); ++i) total += squared_distance(data.row(i), centers.row(labels[i]));
  return total;
}

inline double log_sum_exp(std::span<const double> v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline std::size_t argmax_row(std::span<const double> v) {
  return static_cast<std::size_t>(std::ranges::max_element(v) - v.begin());
}

}  // namespace detail

/// Lloyd's algorithm from k-means++ seeding. Stops after max_iters
/// assignment steps or when no assignment changes. Clusters left empty by
/// an assignment step are reseeded at the point farthest from its centroid.
inline ClusterResult kmeans_fit(const Matrix<double>& data, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  detail::check_fit_inputs(data, k, max_iters);
  const std::size_t n = data.rows();
  Rng rng(seed);
  KMeansModel model;
  model.k = k;
  model.centroids = detail::kmeans_plus_plus(data, k, rng);

  constexpr auto unassigned = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> labels(n, unassigned);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k);

  for (std::size_t it = 0; it < max_iters; ++it) {
    bool changed = false;
    std::ranges::fill(counts, 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = squared_distance(data.row(i), model.centroids.row(0));
      for (std::size_t c = 1; c < k; ++c) {
        const double dc = squared_distance(data.row(i), model.centroids.row(c));
        if (dc < best_d) {
          best_d = dc;
          best = c;
        }
      }
      changed |= labels[i] != best;
      labels[i] = best;
      dist[i] = best_d;
      ++counts[best];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (counts[labels[i]] > 1 && (far == n || dist[i] > dist[far])) far = i;
      --counts[labels[far]];
      labels[far] = c;
      counts[c] = 1;
      dist[far] = 0.0;
      std::ranges::copy(data.row(far), model.centroids.row(c).begin());
      changed = true;
    }
    double cost = 0.0;
    for (double v : dist) cost += v;
    model.objective_history.push_back(cost);
    model.iters_run = it + 1;
    if (!changed) break;
    detail::update_centroids(data, labels, model.centroids);
  }
  model.objective = detail::wcss(data, labels, model.centroids);

  ClusterResult result;
  result.partition = Partition::from_labels(labels);
  result.labels = std::move(labels);
  result.seed = seed;
  result.fit_score = model.objective;
  result.model = std::move(model);
  return result;
}

namespace detail {

class GmmFitter {
 public:
  GmmFitter(const Matrix<double>& data, std::size_t k, const GmmOptions& opts)
      : data_(data), n_(data.rows()), d_(data.cols()), k_(k), opts_(opts) {
    model_.cov_mode = opts.cov_mode;
    model_.weights.assign(k, 1.0 / static_cast<double>(k));
    model_.means = Matrix<double>(k, d_, 0.0);
    model_.variances = Matrix<double>(k, d_, 1.0);
    if (opts.cov_mode == CovMode::full) model_.full_covariances.assign(k, Matrix<double>(d_, d_, 0.0));
    log_norm_.assign(k, 0.0);
    chol_.resize(k);
  }

  void m_step(const Matrix<double>& resp) {
    std::vector<double> nk(k_, 0.0);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t c = 0; c < k_; ++c) nk[c] += resp(i, c);
    double total = 0.0;
    for (double v : nk) total += v;
    for (std::size_t c = 0; c < k_; ++c) {
      model_.weights[c] = nk[c] / total;
      // A component with no responsibility keeps its previous parameters.
      if (nk[c] <= 0.0) continue;
      auto mu = model_.means.row(c);
      std::ranges::fill(mu, 0.0);
      for (std::size_t i = 0; i < n_; ++i) {
        const double r = resp(i, c);
        if (r == 0.0) continue;
        auto x = data_.row(i);
        for (std::size_t j = 0; j < d_; ++j) mu[j] += r * x[j];
      }
      for (auto& v : mu) v /= nk[c];
      if (opts_.cov_mode == CovMode::full) {
        update_full(c, resp, nk[c]);
      } else {
        update_diag(c, resp, nk[c]);
      }
    }
    refresh_normalizers();
  }

  /// Fills responsibilities and returns the total log-likelihood.
  double e_step(Matrix<double>& resp) const {
    double ll = 0.0;
    std::vector<double> logp(k_);
    Eigen::VectorXd diff(static_cast<Eigen::Index>(d_));
    for (std::size_t i = 0; i < n_; ++i) {
      auto x = data_.row(i);
      for (std::size_t c = 0; c < k_; ++c) {
        if (model_.weights[c] <= 0.0) {
          logp[c] = -std::numeric_limits<double>::infinity();
          continue;
        }
        auto mu = model_.means.row(c);
        double maha = 0.0;
        if (opts_.cov_mode == CovMode::full) {
          for (std::size_t j = 0; j < d_; ++j) diff[static_cast<Eigen::Index>(j)] = x[j] - mu[j];
          chol_[c].matrixL().solveInPlace(diff);
          maha = diff.squaredNorm();
        } else {
          auto var = model_.variances.row(c);
          for (std::size_t j = 0; j < d_; ++j) {
            const double t = x[j] - mu[j];
            maha += t * t / var[j];
          }
        }
        logp[c] = log_norm_[c] - 0.5 * maha;
      }
      const double lse = log_sum_exp(logp);
      ll += lse;
      for (std::size_t c = 0; c < k_; ++c) resp(i, c) = std::exp(logp[c] - lse);
    }
    return ll;
  }

  GmmModel& model() { return model_; }

 private:
  void update_diag(std::size_t c, const Matrix<double>& resp, double nk) {
    auto mu = model_.means.row(c);
    auto var = model_.variances.row(c);
    std::ranges::fill(var, 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      const double r = resp(i, c);
      if (r == 0.0) continue;
      auto x = data_.row(i);
      for (std::size_t j = 0; j < d_; ++j) {
        const double t = x[j] - mu[j];
        var[j] += r * t * t;
      }
    }
    for (auto& v : var) v /= nk;
    if (opts_.cov_mode == CovMode::spherical) {
      double mean_var = 0.0;
      for (double v : var) mean_var += v;
      mean_var /= static_cast<double>(d_);
      std::ranges::fill(var, mean_var);
    }
    // Clamping is the exact constrained maximizer, so EM stays monotone.
    for (auto& v : var) v = std::max(v, opts_.reg_floor);
  }

  void update_full(std::size_t c, const Matrix<double>& resp, double nk) {
    auto mu = model_.means.row(c);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d_), static_cast<Eigen::Index>(d_));
    Eigen::VectorXd t(static_cast<Eigen::Index>(d_));
    for (std::size_t i = 0; i < n_; ++i) {
      const double r = resp(i, c);
      if (r == 0.0) continue;
      auto x = data_.row(i);
      for (std::size_t j = 0; j < d_; ++j) t[static_cast<Eigen::Index>(j)] = x[j] - mu[j];
      cov.selfadjointView<Eigen::Lower>().rankUpdate(t, r);
    }
    cov = cov.selfadjointView<Eigen::Lower>();
    cov /= nk;
    // Eigenvalue clamping: the likelihood maximizer subject to a minimum eigenvalue.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::VectorXd lambda = eig.eigenvalues().cwiseMax(opts_.reg_floor);
    cov = eig.eigenvectors() * lambda.asDiagonal() * eig.eigenvectors().transpose();
    auto& dst = model_.full_covariances[c];
    for (std::size_t a = 0; a < d_; ++a) {
      for (std::size_t b = 0; b < d_; ++b)
        dst(a, b) = 0.5 * (cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) +
                           cov(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)));
      model_.variances(c, a) = dst(a, a);
    }
  }

  void refresh_normalizers() {
    const double log_2pi = std::log(2.0 * std::numbers::pi);
    for (std::size_t c = 0; c < k_; ++c) {
      double log_det = 0.0;
      if (opts_.cov_mode == CovMode::full) {
        Eigen::MatrixXd cov(static_cast<Eigen::Index>(d_), static_cast<Eigen::Index>(d_));
        for (std::size_t a = 0; a < d_; ++a)
          for (std::size_t b = 0; b < d_; ++b)
            cov(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = model_.full_covariances[c](a, b);
        chol_[c].compute(cov);
        const auto& l = chol_[c].matrixLLT();
        for (Eigen::Index j = 0; j < l.rows(); ++j) log_det += 2.0 * std::log(l(j, j));
      } else {
        for (double v : model_.variances.row(c)) log_det += std::log(v);
      }
      const double log_w = model_.weights[c] > 0.0 ? std::log(model_.weights[c]) : 0.0;
      log_norm_[c] = log_w - 0.5 * (static_cast<double>(d_) * log_2pi + log_det);
    }
  }

  const Matrix<double>& data_;
  std::size_t n_, d_, k_;
  GmmOptions opts_;
  GmmModel model_;
  std::vector<double> log_norm_;
  std::vector<Eigen::LLT<Eigen::MatrixXd>> chol_;
};

}  // namespace detail

/// EM for a Gaussian mixture started from a finished k-means fit (one-hot
/// responsibilities). The result keeps the k-means seed.
inline ClusterResult gmm_fit_from(const Matrix<double>& data, const ClusterResult& init, std::size_t max_iters,
                                  const GmmOptions& opts = {}) {
  const std::size_t k = init.k();
  detail::check_fit_inputs(data, k, max_iters);
  if (opts.cov_mode == CovMode::full && data.rows() <= k)
    throw ConfigError("full covariance needs N > k (N=" + std::to_string(data.rows()) + ", k=" + std::to_string(k) + ")");
  if (!(opts.reg_floor > 0.0)) throw ConfigError("reg_floor must be positive");
  if (init.labels.size() != data.rows()) throw ShapeError("initial clustering does not match data rows");

  const std::size_t n = data.rows();
  detail::GmmFitter fitter(data, k, opts);
  Matrix<double> resp(n, k, 0.0);
  for (std::size_t i = 0; i < n; ++i) resp(i, init.labels[i]) = 1.0;

  fitter.m_step(resp);
  double ll = fitter.e_step(resp);
  auto& model = fitter.model();
  model.log_likelihood_history.push_back(ll);
  for (std::size_t it = 1; it <= max_iters; ++it) {
    fitter.m_step(resp);
    const double next = fitter.e_step(resp);
    model.log_likelihood_history.push_back(next);
    model.iters_run = it;
    const bool done = std::abs(next - ll) / static_cast<double>(n) < opts.tol;
    ll = next;
    if (done) break;
  }
  if (!std::isfinite(ll)) throw DivergenceError("GMM log-likelihood is not finite");
  model.log_likelihood = ll;

  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = detail::argmax_row(resp.row(i));

  ClusterResult result;
  result.partition = Partition::from_labels(labels);
  result.labels = std::move(labels);
  result.seed = init.seed;
  result.fit_score = ll;
  result.model = std::move(model);
  return result;
}

inline ClusterResult gmm_fit(const Matrix<double>& data, std::size_t k, std::size_t max_iters, std::uint64_t seed,
                             const GmmOptions& opts = {}) {
  detail::check_fit_inputs(data, k, max_iters);
  if (opts.cov_mode == CovMode::full && data.rows() <= k)
    throw ConfigError("full covariance needs N > k (N=" + std::to_string(data.rows()) + ", k=" + std::to_string(k) + ")");
  return gmm_fit_from(data, kmeans_fit(data, k, max_iters, seed), max_iters, opts);
}

/// True when `a` is a strictly better fit than `b`.
inline bool better_fit(const ClusterResult& a, const ClusterResult& b) {
  return a.algorithm() == Algorithm::kmeans ? a.fit_score < b.fit_score : a.fit_score > b.fit_score;
}

/// Best result of a seed-ordered run list; ties keep the earliest (lowest seed).
inline std::size_t select_best(std::span<const ClusterResult> runs) {
  if (runs.empty()) throw EmptyError("no clustering runs to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < runs.size(); ++i)
    if (better_fit(runs[i], runs[best])) best = i;
  return best;
}

/// All restarts with seeds base_seed .. base_seed + restarts - 1, in seed order.
inline std::vector<ClusterResult> fit_restarts(const Matrix<double>& data, std::size_t k, Algorithm algo,
                                               std::size_t restarts, std::size_t max_iters, std::uint64_t base_seed,
                                               const GmmOptions& opts = {}, std::size_t threads = 1) {
  if (restarts < 1) throw ConfigError("restarts must be at least 1");
  detail::check_fit_inputs(data, k, max_iters);
  std::vector<ClusterResult> runs(restarts);
  parallel_for(restarts, threads, [&](std::size_t r) {
    runs[r] = algo == Algorithm::kmeans ? kmeans_fit(data, k, max_iters, base_seed + r)
                                        : gmm_fit(data, k, max_iters, base_seed + r, opts);
  });
  return runs;
}

inline ClusterResult best_of_restarts(const Matrix<double>& data, std::size_t k, Algorithm algo,
                                      std::size_t restarts = kDefaultRestarts, std::size_t max_iters = kDefaultMaxIters,
                                      std::uint64_t base_seed = 0, const GmmOptions& opts = {}, std::size_t threads = 1) {
  auto runs = fit_restarts(data, k, algo, restarts, max_iters, base_seed, opts, threads);
  return std::move(runs[select_best(runs)]);
}

}  // namespace repprobe

namespace repprobe {

inline ClusterResult kmeans_fit(const EmbeddingMatrix& data, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  return kmeans_fit(data.values(), k, max_iters, seed);
}

inline ClusterResult gmm_fit(const EmbeddingMatrix& data, std::size_t k, std::size_t max_iters, std::uint64_t seed,
                             const GmmOptions& opts = {}) {
  return gmm_fit(data.values(), k, max_iters, seed, opts);
}

inline ClusterResult best_of_restarts(const EmbeddingMatrix& data, std::size_t k, Algorithm algo,
                                      std::size_t restarts = kDefaultRestarts, std::size_t max_iters = kDefaultMaxIters,
                                      std::uint64_t base_seed = 0, const GmmOptions& opts = {}, std::size_t threads = 1) {
  return best_of_restarts(data.values(), k, algo, restarts, max_iters, base_seed, opts, threads);
}

}  // namespace repprobe
