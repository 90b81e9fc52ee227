#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "repprobe/cluster.hpp"
#include "repprobe/corpus.hpp"
#include "repprobe/csv.hpp"
#include "repprobe/errors.hpp"
#include "repprobe/infometrics.hpp"
#include "repprobe/parallel.hpp"
#include "repprobe/probe.hpp"

namespace repprobe {

inline const std::vector<std::size_t>& default_k_list() {
  static const std::vector<std::size_t> ks{4, 8, 16, 32, 64, 128, 256};
  return ks;
}

struct SweepConfig {
  std::string model_tag = "model";
  std::vector<std::string> fields;
  std::vector<SpeakerFilter> speakers{SpeakerFilter::all};
  std::vector<Algorithm> clusterers{Algorithm::kmeans};
  std::vector<std::size_t> k_list = default_k_list();
  std::size_t restarts = kDefaultRestarts;
  std::size_t max_iters = kDefaultMaxIters;
  std::uint64_t base_seed = 0;
  GmmOptions gmm;
  /// Score multi-label fields only on rows with a non-empty label set.
  bool exclude_empty = false;
  /// Adds the best ANMI over individual restarts as an extra column.
  bool diagnostic = false;
  /// Measure wall time per row; off keeps reports byte-reproducible.
  bool record_timing = false;
  std::size_t threads = 1;
};

struct SweepRow {
  std::string model_tag;
  std::string task;
  std::string speaker;
  std::string clusterer;
  std::size_t k = 0;
  std::uint64_t chosen_seed = 0;
  double fit_score = 0.0;
  double mi = 0.0;
  double nmi = 0.0;
  double anmi = 0.0;
  double wall_time_ms = 0.0;
  std::optional<double> anmi_best;
};

/// FNV-1a, stable across platforms and runs.
inline std::uint64_t stable_hash(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// First restart seed of a grid cell. The clusterer is not part of the key:
/// GMM fits start from the k-means restarts of the same cell.
inline std::uint64_t cell_seed(std::uint64_t base_seed, SpeakerFilter speaker, std::size_t k) {
  const std::string key = std::string("speaker=") + to_string(speaker) + ";k=" + std::to_string(k);
  return base_seed + (stable_hash(key) & 0xFFFFFFFFull);
}

namespace detail {

template <typename T>
void require_unique(const std::vector<T>& v, const char* what) {
  std::vector<T> s = v;
  std::ranges::sort(s);
  if (std::adjacent_find(s.begin(), s.end()) != s.end()) throw ConfigError(std::string("duplicate ") + what);
}

inline double elapsed_ms(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
}

struct TimedFit {
  ClusterResult result;
  double ms = 0.0;
};

/// Truth partition for a field; with `exclude_empty`, the indices of rows
/// kept (rows whose multi-label set is empty are dropped).
inline std::pair<Partition, std::vector<std::size_t>> scored_truth(const LabelTable& labels, const std::string& field,
                                                                   bool exclude_empty) {
  std::vector<std::size_t> keep;
  if (exclude_empty && labels.kind(field) == FieldKind::multi) {
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (!labels.rows()[i].fields.find(field)->second.empty()) keep.push_back(i);
    std::vector<LabelRow> rows;
    for (auto i : keep) rows.push_back(labels.rows()[i]);
    if (rows.empty()) throw EmptyError("field '" + field + "' has no non-empty label sets");
    return {label_partition(LabelTable(labels.schema(), std::move(rows)), field), keep};
  }
  keep.resize(labels.size());
  std::iota(keep.begin(), keep.end(), std::size_t{0});
  return {label_partition(labels, field), keep};
}

inline Partition restrict_partition(const ClusterResult& fit, std::span<const std::size_t> keep) {
  std::vector<std::size_t> labels;
  labels.reserve(keep.size());
  for (auto i : keep) labels.push_back(fit.labels[i]);
  return Partition::from_labels(labels);
}

}  // namespace detail

inline void validate(const SweepConfig& cfg, const LabelTable& labels) {
  if (cfg.k_list.empty()) throw ConfigError("k list is empty");
  for (std::size_t i = 0; i < cfg.k_list.size(); ++i) {
    if (cfg.k_list[i] < 1) throw ConfigError("k must be at least 1");
    if (i && cfg.k_list[i] <= cfg.k_list[i - 1]) throw ConfigError("k list must be strictly increasing");
  }
  if (cfg.restarts < 1) throw ConfigError("restarts must be at least 1");
  if (cfg.max_iters < 1) throw ConfigError("iterations must be at least 1");
  if (cfg.fields.empty()) throw ConfigError("no label fields requested");
  if (cfg.speakers.empty()) throw ConfigError("no speaker sides requested");
  if (cfg.clusterers.empty()) throw ConfigError("no clusterers requested");
  detail::require_unique(cfg.fields, "label field");
  detail::require_unique(cfg.speakers, "speaker side");
  detail::require_unique(cfg.clusterers, "clusterer");
  for (const auto& f : cfg.fields) labels.kind(f);
}

/// Runs best-of-restarts clustering for every (speaker, clusterer, k) cell
/// and scores it against every requested field. One row per
/// (field, speaker, clusterer, k), sorted in that key order.
inline std::vector<SweepRow> run_sweep(const EmbeddingMatrix& emb, const LabelTable& labels, const SweepConfig& cfg) {
  validate(cfg, labels);
  struct Side {
    SpeakerFilter speaker;
    EmbeddingMatrix emb;
    LabelTable labels;
  };
  std::vector<Side> sides;
  for (auto sp : cfg.speakers) {
    auto [e, l] = align(emb, labels, sp);
    const std::size_t n = e.n_rows();
    for (auto k : cfg.k_list) {
      if (k > n)
        throw ConfigError("k=" + std::to_string(k) + " exceeds N=" + std::to_string(n) + " for speaker '" +
                          to_string(sp) + "'");
      if (cfg.gmm.cov_mode == CovMode::full && k >= n &&
          std::ranges::find(cfg.clusterers, Algorithm::gmm) != cfg.clusterers.end())
        throw ConfigError("full covariance needs N > k for speaker '" + std::string(to_string(sp)) + "'");
    }
    sides.push_back({sp, std::move(e), std::move(l)});
  }

  const std::size_t n_s = sides.size(), n_k = cfg.k_list.size(), n_r = cfg.restarts;
  auto cell_context = [&](std::size_t s, std::size_t ki, const char* algo) {
    return std::string("speaker=") + to_string(sides[s].speaker) + " clusterer=" + algo +
           " k=" + std::to_string(cfg.k_list[ki]);
  };

  // Every clusterer needs the k-means restarts: they are the GMM initializers.
  std::vector<detail::TimedFit> km(n_s * n_k * n_r);
  parallel_for(km.size(), cfg.threads, [&](std::size_t idx) {
    const std::size_t s = idx / (n_k * n_r), ki = (idx / n_r) % n_k, r = idx % n_r;
    const auto seed = cell_seed(cfg.base_seed, sides[s].speaker, cfg.k_list[ki]) + r;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      km[idx].result = kmeans_fit(sides[s].emb.values(), cfg.k_list[ki], cfg.max_iters, seed);
    } catch (const Error& e) {
      rethrow_with_context(e, cell_context(s, ki, "kmeans"));
    }
    km[idx].ms = detail::elapsed_ms(t0);
  });
  std::vector<detail::TimedFit> gm;
  if (std::ranges::find(cfg.clusterers, Algorithm::gmm) != cfg.clusterers.end()) {
    gm.resize(km.size());
    parallel_for(gm.size(), cfg.threads, [&](std::size_t idx) {
      const std::size_t s = idx / (n_k * n_r), ki = (idx / n_r) % n_k;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        gm[idx].result = gmm_fit_from(sides[s].emb.values(), km[idx].result, cfg.max_iters, cfg.gmm);
      } catch (const Error& e) {
        rethrow_with_context(e, cell_context(s, ki, "gmm"));
      }
      gm[idx].ms = detail::elapsed_ms(t0) + km[idx].ms;
    });
  }

  // Truth partitions per (side, field).
  const std::size_t n_f = cfg.fields.size();
  std::vector<std::pair<Partition, std::vector<std::size_t>>> truths(n_s * n_f);
  for (std::size_t s = 0; s < n_s; ++s)
    for (std::size_t f = 0; f < n_f; ++f)
      truths[s * n_f + f] = detail::scored_truth(sides[s].labels, cfg.fields[f], cfg.exclude_empty);

  const std::size_t n_c = cfg.clusterers.size();
  std::vector<SweepRow> rows(n_s * n_c * n_k * n_f);
  parallel_for(rows.size(), cfg.threads, [&](std::size_t idx) {
    const std::size_t s = idx / (n_c * n_k * n_f), c = (idx / (n_k * n_f)) % n_c, ki = (idx / n_f) % n_k,
                      f = idx % n_f;
    const Algorithm algo = cfg.clusterers[c];
    const auto& fits = algo == Algorithm::kmeans ? km : gm;
    const std::size_t first = (s * n_k + ki) * n_r;
    std::size_t best = first;
    double ms = fits[first].ms;
    for (std::size_t r = first + 1; r < first + n_r; ++r) {
      if (better_fit(fits[r].result, fits[best].result)) best = r;
      ms += fits[r].ms;
    }
    const auto& [truth, keep] = truths[s * n_f + f];
    const auto t0 = std::chrono::steady_clock::now();
    const auto report = compare(truth, detail::restrict_partition(fits[best].result, keep));
    SweepRow row;
    row.model_tag = cfg.model_tag;
    row.task = cfg.fields[f];
    row.speaker = to_string(sides[s].speaker);
    row.clusterer = to_string(algo);
    row.k = cfg.k_list[ki];
    row.chosen_seed = fits[best].result.seed;
    row.fit_score = fits[best].result.fit_score;
    row.mi = report.mi;
    row.nmi = report.nmi;
    row.anmi = report.anmi;
    if (cfg.diagnostic) {
      double top = report.anmi;
      for (std::size_t r = first; r < first + n_r; ++r)
        if (r != best) top = std::max(top, compare(truth, detail::restrict_partition(fits[r].result, keep)).anmi);
      row.anmi_best = top;
    }
    row.wall_time_ms = cfg.record_timing ? ms + detail::elapsed_ms(t0) : 0.0;
    rows[idx] = std::move(row);
  });

  std::ranges::stable_sort(rows, [](const SweepRow& a, const SweepRow& b) {
    return std::tie(a.task, a.speaker, a.clusterer, a.k) < std::tie(b.task, b.speaker, b.clusterer, b.k);
  });
  return rows;
}

// ---------------------------------------------------------------------------
// CSV reports
// ---------------------------------------------------------------------------

inline constexpr const char* kSweepHeader = "model,task,speaker,clusterer,k,seed,fit_score,mi,nmi,anmi,wall_time_ms";
inline constexpr const char* kProbeHeader = "model,task,speaker,head,metric,value";

inline std::string format_report(std::vector<SweepRow> rows) {
  if (rows.empty()) throw EmptyError("no sweep rows to report");
  std::ranges::stable_sort(rows, [](const SweepRow& a, const SweepRow& b) {
    return std::tie(a.task, a.speaker, a.clusterer, a.k) < std::tie(b.task, b.speaker, b.clusterer, b.k);
  });
  const bool diagnostic = std::ranges::any_of(rows, [](const SweepRow& r) { return r.anmi_best.has_value(); });
  std::string out = kSweepHeader;
  if (diagnostic) out += ",anmi_best";
  out += '\n';
  for (const auto& r : rows) {
    out += csv_field(r.model_tag) + ',' + csv_field(r.task) + ',' + r.speaker + ',' + r.clusterer + ',' +
           std::to_string(r.k) + ',' + std::to_string(r.chosen_seed) + ',' + format_number(r.fit_score) + ',' +
           format_number(r.mi) + ',' + format_number(r.nmi) + ',' + format_number(r.anmi) + ',' +
           format_number(r.wall_time_ms);
    if (diagnostic) out += ',' + format_number(r.anmi_best.value_or(r.anmi));
    out += '\n';
  }
  return out;
}

inline void emit_report(const std::vector<SweepRow>& rows, const std::filesystem::path& path) {
  const auto text = format_report(rows);
  detail::write_file_atomic(path, [&](std::ostream& out) { out << text; });
}

// ---------------------------------------------------------------------------
// Classifier probe task
// ---------------------------------------------------------------------------

struct ProbeReportRow {
  std::string model_tag;
  std::string task;
  std::string speaker;
  std::string head;
  std::string metric;
  double value = 0.0;
};

struct ProbeTaskConfig {
  std::string model_tag = "model";
  std::string field;
  SpeakerFilter speaker = SpeakerFilter::all;
  TrainConfig train;
  bool float32 = false;
};

struct ProbeTaskResult {
  ProbeModel<double> model;
  std::vector<std::string> classes;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  ProbeMetrics metrics;
  /// No test split was supplied; metrics come from the validation split.
  bool used_valid_fallback = false;
  std::vector<ProbeReportRow> rows;
};

/// Trains on `train`, selects on `valid` and reports on `test` (or on
/// `valid`, flagged, when no test split is given). The head follows the
/// field kind: softmax for single-label, sigmoid for multi-label.
inline ProbeTaskResult run_probe_task(const EmbeddingMatrix& train, const EmbeddingMatrix& valid,
                                      const EmbeddingMatrix* test, const LabelTable& labels,
                                      const ProbeTaskConfig& cfg) {
  labels.kind(cfg.field);
  auto [tr_e, tr_l] = align(train, labels, cfg.speaker);
  auto [va_e, va_l] = align(valid, labels, cfg.speaker);
  std::optional<std::pair<EmbeddingMatrix, LabelTable>> te;
  if (test) te = align(*test, labels, cfg.speaker);

  std::vector<const LabelTable*> tables{&tr_l, &va_l};
  if (te) tables.push_back(&te->second);
  ProbeTaskResult out;
  out.classes = field_vocabulary(tables, cfg.field);
  if (out.classes.empty()) throw EmptyError("field '" + cfg.field + "' has no labels");
  const auto tr_y = make_targets(tr_l, cfg.field, out.classes);
  const auto va_y = make_targets(va_l, cfg.field, out.classes);
  const EmbeddingMatrix& eval_e = te ? te->first : va_e;
  const auto eval_y = te ? make_targets(te->second, cfg.field, out.classes) : va_y;
  out.used_valid_fallback = !te;

  auto run = [&]<typename Real>() {
    auto trained = train_probe<Real>(tr_e, tr_y, va_e, va_y, cfg.train);
    out.metrics = evaluate_probe(trained.model, eval_e, eval_y, cfg.train.threshold);
    out.history = std::move(trained.history);
    out.best_epoch = trained.best_epoch;
    out.model = {trained.model.head, trained.model.weights.template cast<double>(),
                 std::vector<double>(trained.model.bias.begin(), trained.model.bias.end())};
  };
  if (cfg.float32) {
    run.template operator()<float>();
  } else {
    run.template operator()<double>();
  }

  const std::string suffix = out.used_valid_fallback ? "_valid_fallback" : "";
  const Head head = head_for(tr_y);
  auto add = [&](const std::string& metric, double value) {
    out.rows.push_back({cfg.model_tag, cfg.field, to_string(cfg.speaker), to_string(head), metric + suffix, value});
  };
  if (head == Head::softmax) {
    add("accuracy", *out.metrics.accuracy);
  } else {
    add("micro_f1", *out.metrics.micro_f1);
  }
  add("loss", out.metrics.loss);
  return out;
}

inline std::string format_probe_rows(const std::vector<ProbeReportRow>& rows) {
  std::string out;
  for (const auto& r : rows)
    out += csv_field(r.model_tag) + ',' + csv_field(r.task) + ',' + r.speaker + ',' + r.head + ',' + r.metric + ',' +
           format_number(r.value) + '\n';
  return out;
}

/// Appends rows to a probe report, writing the header when the file is new or empty.
inline void append_probe_report(const std::vector<ProbeReportRow>& rows, const std::filesystem::path& path) {
  std::error_code ec;
  const bool fresh = !std::filesystem::exists(path, ec) || std::filesystem::file_size(path, ec) == 0;
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open '" + path.string() + "' for appending");
  if (fresh) out << kProbeHeader << '\n';
  out << format_probe_rows(rows);
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace repprobe
