#pragma once

#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "repprobe/cluster.hpp"
#include "repprobe/corpus.hpp"
#include "repprobe/errors.hpp"
#include "repprobe/infometrics.hpp"
#include "repprobe/parallel.hpp"
#include "repprobe/probe.hpp"
#include "repprobe/sweep.hpp"
#include "repprobe/viz.hpp"

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data
// error, 3 numeric failure. Data goes to stdout or --out; diagnostics and
// the one-line error record go to stderr.

namespace repprobe::cli {

namespace detail {

inline LabelSchema make_schema(const std::vector<std::string>& fields, const std::vector<std::string>& multi) {
  LabelSchema schema;
  for (const auto& f : fields) schema[f] = FieldKind::single;
  for (const auto& m : multi) {
    if (!schema.contains(m)) throw ConfigError("--multi names '" + m + "', which is not a requested --field");
    schema[m] = FieldKind::multi;
  }
  return schema;
}

inline std::string default_model_tag(const std::string& embeddings_path) {
  return std::filesystem::path(embeddings_path).stem().string();
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  repprobe::detail::write_file_atomic(path, [&](std::ostream& os) { os << text; });
}

inline std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

struct SweepArgs {
  std::string embeddings, labels, out, model_tag, cov_mode = "diag";
  std::vector<std::string> fields, multi, speakers{"all"}, clusterers{"kmeans"};
  std::vector<std::size_t> k_list = default_k_list();
  std::size_t restarts = kDefaultRestarts, iters = kDefaultMaxIters, threads = default_threads();
  std::uint64_t seed = 0;
  double reg_floor = 1e-6;
  bool diagnostic = false, exclude_empty = false, timing = false;
};

struct ClassifyArgs {
  std::string embeddings, valid_embeddings, test_embeddings, labels, field, speaker = "all", out, model_out, model_tag;
  bool multi = false, float32 = false;
  TrainConfig train;
};

struct MetricsArgs {
  std::string pred, truth, column = "label", out;
};

struct ProjectArgs {
  std::string embeddings, labels, field, speaker = "all", out;
  std::vector<std::string> multi;
  TsneConfig tsne;
  bool no_pca = false;
};

struct ExemplarArgs {
  std::string embeddings, texts, labels, speaker = "all", clusterer = "kmeans", cov_mode = "diag", mode = "random", out;
  std::size_t k = 32, restarts = kDefaultRestarts, iters = kDefaultMaxIters, clusters = 5, samples = 5,
              threads = default_threads();
  std::uint64_t seed = 0;
};

inline int run_sweep_cmd(const SweepArgs& a, std::ostream& /*out*/, std::ostream& err) {
  SweepConfig cfg;
  cfg.model_tag = a.model_tag.empty() ? default_model_tag(a.embeddings) : a.model_tag;
  cfg.fields = a.fields;
  cfg.speakers.clear();
  for (const auto& s : a.speakers) cfg.speakers.push_back(parse_speaker_filter(s));
  cfg.clusterers.clear();
  for (const auto& c : a.clusterers) cfg.clusterers.push_back(parse_algorithm(c));
  cfg.k_list = a.k_list;
  cfg.restarts = a.restarts;
  cfg.max_iters = a.iters;
  cfg.base_seed = a.seed;
  cfg.gmm.cov_mode = parse_cov_mode(a.cov_mode);
  cfg.gmm.reg_floor = a.reg_floor;
  cfg.diagnostic = a.diagnostic;
  cfg.exclude_empty = a.exclude_empty;
  cfg.record_timing = a.timing;
  cfg.threads = a.threads;
  const auto schema = make_schema(a.fields, a.multi);
  const auto emb = load_embeddings(a.embeddings);
  const auto labels = load_labels(a.labels, schema);
  const auto rows = run_sweep(emb, labels, cfg);
  emit_report(rows, a.out);
  err << "wrote " << rows.size() << " rows to " << a.out << '\n';
  return 0;
}

inline int run_classify_cmd(const ClassifyArgs& a, std::ostream& out, std::ostream& err) {
  LabelSchema schema{{a.field, a.multi ? FieldKind::multi : FieldKind::single}};
  const auto labels = load_labels(a.labels, schema);
  const auto train = load_embeddings(a.embeddings);
  const auto valid = load_embeddings(a.valid_embeddings);
  std::optional<EmbeddingMatrix> test;
  if (!a.test_embeddings.empty()) test = load_embeddings(a.test_embeddings);
  ProbeTaskConfig cfg;
  cfg.model_tag = a.model_tag.empty() ? default_model_tag(a.embeddings) : a.model_tag;
  cfg.field = a.field;
  cfg.speaker = parse_speaker_filter(a.speaker);
  cfg.train = a.train;
  cfg.float32 = a.float32;
  const auto result = run_probe_task(train, valid, test ? &*test : nullptr, labels, cfg);
  if (result.used_valid_fallback) err << "warning: no test split given; reporting validation metrics\n";
  if (!a.model_out.empty()) save_probe(a.model_out, result.model);
  if (a.out.empty() || a.out == "-") {
    out << kProbeHeader << '\n' << format_probe_rows(result.rows);
  } else {
    append_probe_report(result.rows, a.out);
  }
  err << "best epoch " << result.best_epoch << " of " << result.history.size() << '\n';
  return 0;
}

inline Partition partition_by_id(const std::vector<std::pair<std::string, std::string>>& rows,
                                 const std::vector<std::string>& order, const std::string& origin) {
  std::unordered_map<std::string, std::string> by_id(rows.begin(), rows.end());
  if (by_id.size() != order.size())
    throw JoinError(origin + " holds " + std::to_string(by_id.size()) + " ids, expected " + std::to_string(order.size()));
  std::vector<std::string> keys;
  keys.reserve(order.size());
  for (const auto& id : order) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw JoinError(origin + " lacks id '" + id + "'");
    keys.push_back(it->second);
  }
  return Partition::from_keys<std::string>(keys);
}

inline int run_metrics_cmd(const MetricsArgs& a, std::ostream& out, std::ostream& /*err*/) {
  const auto truth_rows = load_assignments(a.truth, a.column);
  const auto pred_rows = load_assignments(a.pred, a.column);
  std::vector<std::string> order;
  for (const auto& [id, _] : truth_rows) order.push_back(id);
  const auto truth = partition_by_id(truth_rows, order, a.truth);
  const auto pred = partition_by_id(pred_rows, order, a.pred);
  const auto r = compare(truth, pred);
  char buf[512];
  std::snprintf(buf, sizeof buf, "n=%zu\nmi=%.6f\nh_true=%.6f\nh_pred=%.6f\nnmi=%.6f\nemi=%.6f\nanmi=%.6f\n",
                truth.n_items(), r.mi, r.h_a, r.h_b, r.nmi, r.emi, r.anmi);
  write_text(a.out, buf, out);
  return 0;
}

inline int run_project_cmd(const ProjectArgs& a, std::ostream& out, std::ostream& err) {
  auto emb = load_embeddings(a.embeddings);
  std::vector<std::string> label_names;
  if (!a.labels.empty()) {
    std::vector<std::string> fields;
    if (!a.field.empty()) fields.push_back(a.field);
    const auto labels = load_labels(a.labels, make_schema(fields, a.multi));
    auto [e, l] = align(emb, labels, parse_speaker_filter(a.speaker));
    emb = std::move(e);
    if (!a.field.empty()) {
      const auto part = label_partition(l, a.field);
      for (auto c : part.assignments) label_names.push_back(part.class_names[c]);
    }
  } else if (!a.field.empty() || a.speaker != "all") {
    throw ConfigError("--field and --speaker need --labels");
  }
  auto cfg = a.tsne;
  cfg.pca = !a.no_pca;
  const auto proj = tsne_project(emb, cfg);
  for (const auto& w : proj.warnings) err << "warning: " << w << '\n';
  write_text(a.out, format_projection(proj, emb.row_ids(), label_names), out);
  return 0;
}

inline int run_exemplars_cmd(const ExemplarArgs& a, std::ostream& out, std::ostream& /*err*/) {
  auto emb = load_embeddings(a.embeddings);
  if (!a.labels.empty()) {
    auto [e, l] = align(emb, load_labels(a.labels, {}), parse_speaker_filter(a.speaker));
    emb = std::move(e);
  } else if (a.speaker != "all") {
    throw ConfigError("--speaker needs --labels");
  }
  const auto texts = load_texts(a.texts);
  GmmOptions gmm;
  gmm.cov_mode = parse_cov_mode(a.cov_mode);
  const auto fit = best_of_restarts(emb, a.k, parse_algorithm(a.clusterer), a.restarts, a.iters, a.seed, gmm, a.threads);
  ExemplarConfig cfg{a.clusters, a.samples, parse_exemplar_mode(a.mode), a.seed};
  const auto blocks = exemplars(fit, emb.values(), emb.row_ids(), texts, cfg);
  write_text(a.out, format_exemplars(blocks), out);
  return 0;
}

}  // namespace detail

/// Parses argv, runs the selected subcommand and maps failures to exit codes.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Probe sentence embeddings for task-relevant information", "repprobe"};
  app.require_subcommand(1);

  detail::SweepArgs sw;
  auto* sweep = app.add_subcommand("cluster-sweep", "Cluster embeddings over a K grid and score against labels");
  sweep->add_option("--embeddings", sw.embeddings, "EMB1 embedding file")->required();
  sweep->add_option("--labels", sw.labels, "Label TSV")->required();
  sweep->add_option("--field", sw.fields, "Label field(s) to score against")->required()->delimiter(',');
  sweep->add_option("--multi", sw.multi, "Fields holding '|'-separated label sets")->delimiter(',');
  sweep->add_option("--speaker", sw.speakers, "user, system or all")->delimiter(',')->capture_default_str();
  sweep->add_option("--clusterer", sw.clusterers, "kmeans and/or gmm")->delimiter(',')->capture_default_str();
  sweep->add_option("--k-list", sw.k_list, "Cluster counts")->delimiter(',')->capture_default_str();
  sweep->add_option("--restarts", sw.restarts, "Restarts per K")->capture_default_str();
  sweep->add_option("--iters", sw.iters, "Iteration cap per fit")->capture_default_str();
  sweep->add_option("--seed", sw.seed, "Base seed")->capture_default_str();
  sweep->add_option("--cov-mode", sw.cov_mode, "GMM covariance: diag, full or spherical")->capture_default_str();
  sweep->add_option("--reg-floor", sw.reg_floor, "GMM variance floor")->capture_default_str();
  sweep->add_option("--out", sw.out, "Report CSV")->required();
  sweep->add_option("--model-tag", sw.model_tag, "Value of the model column (default: embeddings file stem)");
  sweep->add_option("--threads", sw.threads, "Worker threads (results do not depend on it)");
  sweep->add_flag("--diagnostic", sw.diagnostic, "Add the best per-restart ANMI column");
  sweep->add_flag("--exclude-empty", sw.exclude_empty, "Score multi-label fields only on non-empty sets");
  sweep->add_flag("--timing", sw.timing, "Record wall time per row (otherwise 0)");

  detail::ClassifyArgs cl;
  auto* classify = app.add_subcommand("classify", "Train and evaluate a linear classifier probe");
  classify->add_option("--embeddings", cl.embeddings, "Training split embeddings")->required();
  classify->add_option("--valid-embeddings", cl.valid_embeddings, "Validation split embeddings")->required();
  classify->add_option("--test-embeddings", cl.test_embeddings, "Test split embeddings");
  classify->add_option("--labels", cl.labels, "Label TSV covering all splits")->required();
  classify->add_option("--field", cl.field, "Label field")->required();
  classify->add_flag("--multi", cl.multi, "Field holds label sets (sigmoid head)");
  classify->add_option("--speaker", cl.speaker, "user, system or all")->capture_default_str();
  classify->add_option("--lr", cl.train.learning_rate, "AdamW learning rate")->capture_default_str();
  classify->add_option("--clip", cl.train.clip_norm, "Global gradient norm clip")->capture_default_str();
  classify->add_option("--weight-decay", cl.train.weight_decay, "AdamW weight decay")->capture_default_str();
  classify->add_option("--batch-size", cl.train.batch_size, "Mini-batch size")->capture_default_str();
  classify->add_option("--epochs", cl.train.max_epochs, "Maximum epochs")->capture_default_str();
  classify->add_option("--patience", cl.train.patience, "Early-stopping patience (0 disables)")->capture_default_str();
  classify->add_option("--threshold", cl.train.threshold, "Sigmoid decision threshold")->capture_default_str();
  classify->add_option("--seed", cl.train.seed, "Shuffle seed")->capture_default_str();
  classify->add_flag("--float32", cl.float32, "Train in single precision");
  classify->add_option("--out", cl.out, "Probe report CSV (appended; stdout if omitted)");
  classify->add_option("--model-out", cl.model_out, "Write the trained probe (PRB1)");
  classify->add_option("--model-tag", cl.model_tag, "Value of the model column");

  detail::MetricsArgs me;
  auto* metrics = app.add_subcommand("metrics", "Compare two partitions given as id/label TSVs");
  metrics->add_option("--pred", me.pred, "Predicted assignment TSV")->required();
  metrics->add_option("--true", me.truth, "Reference assignment TSV")->required();
  metrics->add_option("--column", me.column, "Label column name")->capture_default_str();
  metrics->add_option("--out", me.out, "Output file (stdout if omitted)");

  detail::ProjectArgs pr;
  auto* project = app.add_subcommand("project", "t-SNE projection to 2-D as id,x,y,label CSV");
  project->add_option("--embeddings", pr.embeddings, "EMB1 embedding file")->required();
  project->add_option("--labels", pr.labels, "Label TSV (for --field and --speaker)");
  project->add_option("--field", pr.field, "Field used for the label column");
  project->add_option("--multi", pr.multi, "Fields holding label sets")->delimiter(',');
  project->add_option("--speaker", pr.speaker, "user, system or all")->capture_default_str();
  project->add_option("--perplexity", pr.tsne.perplexity, "Target perplexity")->capture_default_str();
  project->add_option("--iters", pr.tsne.iters, "Gradient iterations")->capture_default_str();
  project->add_option("--seed", pr.tsne.seed, "Initialization seed")->capture_default_str();
  project->add_option("--pca-dims", pr.tsne.pca_dims, "PCA pre-reduction dimensions")->capture_default_str();
  project->add_flag("--no-pca", pr.no_pca, "Skip PCA pre-reduction");
  project->add_option("--out", pr.out, "Projection CSV (stdout if omitted)");

  detail::ExemplarArgs ex;
  auto* exemplar = app.add_subcommand("exemplars", "List sample utterances from a few clusters");
  exemplar->add_option("--embeddings", ex.embeddings, "EMB1 embedding file")->required();
  exemplar->add_option("--texts", ex.texts, "TSV with id and text columns")->required();
  exemplar->add_option("--labels", ex.labels, "Label TSV (for --speaker)");
  exemplar->add_option("--speaker", ex.speaker, "user, system or all")->capture_default_str();
  exemplar->add_option("--k", ex.k, "Cluster count")->capture_default_str();
  exemplar->add_option("--clusterer", ex.clusterer, "kmeans or gmm")->capture_default_str();
  exemplar->add_option("--cov-mode", ex.cov_mode, "GMM covariance mode")->capture_default_str();
  exemplar->add_option("--restarts", ex.restarts, "Restarts")->capture_default_str();
  exemplar->add_option("--iters", ex.iters, "Iteration cap")->capture_default_str();
  exemplar->add_option("--seed", ex.seed, "Seed for clustering and sampling")->capture_default_str();
  exemplar->add_option("--clusters", ex.clusters, "Clusters to show")->capture_default_str();
  exemplar->add_option("--samples", ex.samples, "Samples per cluster")->capture_default_str();
  exemplar->add_option("--mode", ex.mode, "random or nearest_centroid")->capture_default_str();
  exemplar->add_option("--threads", ex.threads, "Worker threads");
  exemplar->add_option("--out", ex.out, "Output file (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: UsageError: " << detail::one_line(e.what()) << '\n';
    auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 1;
  }

  try {
    if (sweep->parsed()) return detail::run_sweep_cmd(sw, out, err);
    if (classify->parsed()) return detail::run_classify_cmd(cl, out, err);
    if (metrics->parsed()) return detail::run_metrics_cmd(me, out, err);
    if (project->parsed()) return detail::run_project_cmd(pr, out, err);
    if (exemplar->parsed()) return detail::run_exemplars_cmd(ex, out, err);
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << detail::one_line(e.what()) << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "error: InternalError: " << detail::one_line(e.what()) << '\n';
    return static_cast<int>(ErrorClass::data);
  }
  return 1;
}

}  // namespace repprobe::cli
