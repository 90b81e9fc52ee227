#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "repprobe/corpus.hpp"
#include "repprobe/errors.hpp"

// Information-theoretic comparison of two partitions. All logarithms are
// natural, so MI, entropies and EMI are in nats.

namespace repprobe {

/// |A| x |B| overlap counts between two partitions of the same items.
class ContingencyTable {
 public:
  ContingencyTable(std::size_t rows, std::size_t cols, std::vector<std::uint64_t> counts)
      : rows_(rows), cols_(cols), counts_(std::move(counts)), row_sums_(rows, 0), col_sums_(cols, 0) {
    if (counts_.size() != rows_ * cols_) throw ShapeError("contingency counts do not match the declared shape");
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) {
        row_sums_[i] += at(i, j);
        col_sums_[j] += at(i, j);
        n_ += at(i, j);
      }
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::uint64_t at(std::size_t i, std::size_t j) const { return counts_[i * cols_ + j]; }
  const std::vector<std::uint64_t>& row_marginals() const noexcept { return row_sums_; }
  const std::vector<std::uint64_t>& col_marginals() const noexcept { return col_sums_; }
  std::uint64_t n() const noexcept { return n_; }

  ContingencyTable transpose() const {
    std::vector<std::uint64_t> t(counts_.size());
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t[j * rows_ + i] = at(i, j);
    return ContingencyTable(cols_, rows_, std::move(t));
  }

  /// True when every non-empty row and column holds exactly one non-zero
  /// cell, i.e. the partitions agree up to relabeling.
  bool is_permutation() const {
    std::vector<int> row_nz(rows_, 0), col_nz(cols_, 0);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j)
        if (at(i, j)) {
          ++row_nz[i];
          ++col_nz[j];
        }
    auto ok = [](int c) { return c <= 1; };
    return std::ranges::all_of(row_nz, ok) && std::ranges::all_of(col_nz, ok);
  }

 private:
  std::size_t rows_, cols_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint64_t> row_sums_, col_sums_;
  std::uint64_t n_ = 0;
};

inline ContingencyTable contingency(const Partition& a, const Partition& b) {
  if (a.n_items() != b.n_items())
    throw ShapeError("partition sizes differ: " + std::to_string(a.n_items()) + " vs " + std::to_string(b.n_items()));
  std::vector<std::uint64_t> counts(a.n_classes() * b.n_classes(), 0);
  for (std::size_t i = 0; i < a.n_items(); ++i) ++counts[a.assignments[i] * b.n_classes() + b.assignments[i]];
  return ContingencyTable(a.n_classes(), b.n_classes(), std::move(counts));
}

inline constexpr double kMetricEps = 1e-12;

/// -sum p ln p over class sizes; empty classes contribute nothing.
inline double entropy(std::span<const std::uint64_t> sizes) {
  std::uint64_t n = 0;
  for (auto s : sizes) n += s;
  if (n == 0) return 0.0;
  const double nn = static_cast<double>(n);
  double h = 0.0;
  for (auto s : sizes) {
    if (s == 0) continue;
    const double p = static_cast<double>(s) / nn;
    h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

inline double entropy(const Partition& p) {
  const auto sizes = p.class_sizes();
  return entropy(std::vector<std::uint64_t>(sizes.begin(), sizes.end()));
}

inline double mutual_information(const ContingencyTable& t) {
  if (t.n() == 0) return 0.0;
  const double n = static_cast<double>(t.n());
  const double log_n = std::log(n);
  double mi = 0.0;
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double log_a = std::log(static_cast<double>(t.row_marginals()[i]));
    for (std::size_t j = 0; j < t.cols(); ++j) {
      const auto nij = t.at(i, j);
      if (nij == 0) continue;
      const double c = static_cast<double>(nij);
      mi += c / n * (log_n + std::log(c) - log_a - std::log(static_cast<double>(t.col_marginals()[j])));
    }
  }
  return std::max(mi, 0.0);
}

/// MI normalized by the arithmetic mean of the two entropies, in [0, 1].
inline double nmi(const ContingencyTable& t) {
  const double ha = entropy(t.row_marginals());
  const double hb = entropy(t.col_marginals());
  if (ha == 0.0 && hb == 0.0) return 1.0;
  return std::clamp(mutual_information(t) / (0.5 * (ha + hb)), 0.0, 1.0);
}

/// Expected MI over all tables with the observed marginals (generalized
/// hypergeometric model). Exact; factorials come from a log-gamma table.
inline double expected_mi(const ContingencyTable& t) {
  const std::uint64_t n = t.n();
  if (n == 0) return 0.0;
  std::vector<double> log_fact(n + 1);
  for (std::uint64_t x = 0; x <= n; ++x) log_fact[x] = std::lgamma(static_cast<double>(x) + 1.0);
  const double nn = static_cast<double>(n);
  const double log_n = std::log(nn);
  double emi = 0.0;
  for (auto a : t.row_marginals()) {
    if (a == 0) continue;
    for (auto b : t.col_marginals()) {
      if (b == 0) continue;
      const std::uint64_t lo = std::max<std::uint64_t>(1, a + b > n ? a + b - n : 0);
      const std::uint64_t hi = std::min(a, b);
      const double base = log_fact[a] + log_fact[b] + log_fact[n - a] + log_fact[n - b] - log_fact[n];
      const double log_ab = std::log(static_cast<double>(a)) + std::log(static_cast<double>(b));
      for (std::uint64_t m = lo; m <= hi; ++m) {
        const double md = static_cast<double>(m);
        const double log_p = base - log_fact[m] - log_fact[a - m] - log_fact[b - m] - log_fact[n - a - b + m];
        emi += md / nn * (log_n + std::log(md) - log_ab) * std::exp(log_p);
      }
    }
  }
  return std::max(emi, 0.0);
}

namespace detail {

inline double adjusted_from(const ContingencyTable& t, double mi, double emi, double h_mean) {
  if (t.is_permutation()) return 1.0;
  double num = mi - emi;
  if (std::abs(num) < kMetricEps) num = 0.0;
  const double den = h_mean - emi;
  if (std::abs(den) < kMetricEps) return 0.0;
  return std::min(num / den, 1.0);
}

}  // namespace detail

/// Chance-adjusted NMI: (MI - EMI) / (mean(H(A), H(B)) - EMI).
/// 1 for partitions equal up to relabeling; 0 in expectation for independent ones.
inline double anmi(const ContingencyTable& t) {
  const double h_mean = 0.5 * (entropy(t.row_marginals()) + entropy(t.col_marginals()));
  return detail::adjusted_from(t, mutual_information(t), expected_mi(t), h_mean);
}

struct MiReport {
  double mi = 0.0;
  double h_a = 0.0;
  double h_b = 0.0;
  double nmi = 0.0;
  double emi = 0.0;
  double anmi = 0.0;
};

inline MiReport compare(const ContingencyTable& t) {
  MiReport r;
  r.mi = mutual_information(t);
  r.h_a = entropy(t.row_marginals());
  r.h_b = entropy(t.col_marginals());
  r.nmi = nmi(t);
  r.emi = expected_mi(t);
  r.anmi = detail::adjusted_from(t, r.mi, r.emi, 0.5 * (r.h_a + r.h_b));
  return r;
}

inline MiReport compare(const Partition& a, const Partition& b) { return compare(contingency(a, b)); }

}  // namespace repprobe
