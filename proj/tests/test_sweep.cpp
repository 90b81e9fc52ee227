#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "repprobe/sweep.hpp"

using namespace repprobe;

namespace {

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    out.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return out;
}

std::size_t count_commas(const std::string& s) { return static_cast<std::size_t>(std::ranges::count(s, ',')); }

SweepConfig intent_config(std::vector<std::size_t> ks) {
  SweepConfig cfg;
  cfg.fields = {"intent"};
  cfg.k_list = std::move(ks);
  return cfg;
}

}  // namespace

TEST(Seeds, CellSeedIsStableAndIgnoresClusterer) {
  EXPECT_EQ(stable_hash(""), 14695981039346656037ull);
  EXPECT_EQ(stable_hash("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(cell_seed(0, SpeakerFilter::all, 8), stable_hash("speaker=all;k=8") & 0xFFFFFFFFull);
  EXPECT_EQ(cell_seed(5, SpeakerFilter::user, 4), 5 + (stable_hash("speaker=user;k=4") & 0xFFFFFFFFull));
  EXPECT_NE(cell_seed(0, SpeakerFilter::user, 4), cell_seed(0, SpeakerFilter::system, 4));
}

TEST(Sweep, DefaultGridGivesOneRowPerK) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(300, 4, 4, 10.0, 1.0, 1));
  const auto rows = run_sweep(c.emb, c.labels, intent_config(default_k_list()));
  ASSERT_EQ(rows.size(), 7u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].k, default_k_list()[i]);
    EXPECT_EQ(rows[i].task, "intent");
    EXPECT_EQ(rows[i].speaker, "all");
    EXPECT_EQ(rows[i].clusterer, "kmeans");
    const auto first = cell_seed(0, SpeakerFilter::all, rows[i].k);
    EXPECT_GE(rows[i].chosen_seed, first);
    EXPECT_LT(rows[i].chosen_seed, first + kDefaultRestarts);
    EXPECT_EQ(rows[i].wall_time_ms, 0.0);
  }
}

TEST(Sweep, RowMatchesStandaloneBestOfRestarts) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(200, 5, 3, 4.0, 1.0, 2));
  auto cfg = intent_config({3, 5, 9});
  cfg.restarts = 4;
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  for (const auto& row : rows) {
    const auto fit = best_of_restarts(c.emb.values(), row.k, Algorithm::kmeans, 4, kDefaultMaxIters,
                                      cell_seed(0, SpeakerFilter::all, row.k));
    EXPECT_EQ(row.chosen_seed, fit.seed);
    EXPECT_EQ(row.fit_score, fit.fit_score);
    const auto report = compare(label_partition(c.labels, "intent"), fit.partition);
    EXPECT_EQ(row.anmi, report.anmi);
    EXPECT_EQ(row.nmi, report.nmi);
    EXPECT_EQ(row.mi, report.mi);
  }
}

TEST(Sweep, SeparatedBlobsPeakAtTrueK) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(800, 8, 16, 10.0, 1.0, 3));
  auto cfg = intent_config({4, 8, 16, 32});
  cfg.clusterers = {Algorithm::kmeans, Algorithm::gmm};
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  ASSERT_EQ(rows.size(), 8u);
  for (const char* algo : {"kmeans", "gmm"}) {
    const SweepRow* best = nullptr;
    for (const auto& r : rows)
      if (r.clusterer == algo && (!best || r.anmi > best->anmi)) best = &r;
    ASSERT_NE(best, nullptr);
    EXPECT_EQ(best->k, 8u) << algo;
    EXPECT_GE(best->anmi, 0.99) << algo;
  }
}

TEST(Sweep, ChanceLevelOnNoise) {
  std::mt19937_64 gen(4);
  std::normal_distribution<double> normal;
  const std::size_t n = 2000;
  oracle::Blobs b{Matrix<double>(n, 8), std::vector<std::size_t>(n), Matrix<double>()};
  for (auto& v : b.x.flat()) v = normal(gen);
  for (auto& l : b.labels) l = gen() % 6;
  const auto c = oracle::labeled_corpus(b);
  auto cfg = intent_config({4, 8, 16, 32, 64});
  cfg.restarts = 3;
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_LT(std::abs(rows[i].anmi), 0.05) << "k=" << rows[i].k;
    if (i) {
      EXPECT_GT(rows[i].nmi, rows[i - 1].nmi) << "k=" << rows[i].k;
    }
  }
}

TEST(Sweep, FullGridIsCompleteAndSorted) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(120, 3, 3, 6.0, 1.0, 5));
  SweepConfig cfg;
  cfg.fields = {"slots", "intent"};
  cfg.speakers = {SpeakerFilter::user, SpeakerFilter::system, SpeakerFilter::all};
  cfg.clusterers = {Algorithm::gmm, Algorithm::kmeans};
  cfg.k_list = {2, 3};
  cfg.restarts = 2;
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  ASSERT_EQ(rows.size(), 2u * 3u * 2u * 2u);
  std::set<std::tuple<std::string, std::string, std::string, std::size_t>> keys;
  for (const auto& r : rows) keys.emplace(r.task, r.speaker, r.clusterer, r.k);
  EXPECT_EQ(keys.size(), rows.size());
  for (std::size_t i = 1; i < rows.size(); ++i)
    EXPECT_LT(std::tie(rows[i - 1].task, rows[i - 1].speaker, rows[i - 1].clusterer, rows[i - 1].k),
              std::tie(rows[i].task, rows[i].speaker, rows[i].clusterer, rows[i].k));
  EXPECT_EQ(rows.front().task, "intent");
  EXPECT_EQ(rows.front().speaker, "all");
  EXPECT_EQ(rows.front().clusterer, "gmm");
}

TEST(Sweep, SpeakerSideRestrictsRows) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(90, 3, 3, 6.0, 1.0, 6));
  auto cfg = intent_config({2});
  cfg.speakers = {SpeakerFilter::user};
  cfg.restarts = 1;
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  auto [ue, ul] = align(c.emb, c.labels, SpeakerFilter::user);
  EXPECT_EQ(ue.n_rows(), 45u);
  const auto fit = kmeans_fit(ue.values(), 2, kDefaultMaxIters, cell_seed(0, SpeakerFilter::user, 2));
  EXPECT_EQ(rows.at(0).fit_score, fit.fit_score);
}

TEST(Sweep, DeterministicAcrossThreadCounts) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(300, 6, 5, 5.0, 1.0, 7));
  SweepConfig cfg;
  cfg.fields = {"intent", "slots"};
  cfg.clusterers = {Algorithm::kmeans, Algorithm::gmm};
  cfg.k_list = {2, 6, 12};
  cfg.restarts = 3;
  cfg.threads = 1;
  const auto a = format_report(run_sweep(c.emb, c.labels, cfg));
  cfg.threads = 4;
  const auto b = format_report(run_sweep(c.emb, c.labels, cfg));
  EXPECT_EQ(a, b);
}

TEST(Sweep, ConfigErrorsBeforeAnyWork) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(20, 2, 2, 6.0, 1.0, 8));
  EXPECT_THROW(run_sweep(c.emb, c.labels, intent_config({4, 21})), ConfigError);
  EXPECT_THROW(run_sweep(c.emb, c.labels, intent_config({})), ConfigError);
  EXPECT_THROW(run_sweep(c.emb, c.labels, intent_config({4, 4})), ConfigError);
  EXPECT_THROW(run_sweep(c.emb, c.labels, intent_config({0})), ConfigError);
  auto cfg = intent_config({2});
  cfg.fields = {"intent", "intent"};
  EXPECT_THROW(run_sweep(c.emb, c.labels, cfg), ConfigError);
  cfg.fields = {"domain"};
  EXPECT_THROW(run_sweep(c.emb, c.labels, cfg), SchemaError);
  cfg = intent_config({2});
  cfg.restarts = 0;
  EXPECT_THROW(run_sweep(c.emb, c.labels, cfg), ConfigError);
  // k fits the full corpus but not one speaker side.
  cfg = intent_config({11});
  cfg.speakers = {SpeakerFilter::user};
  EXPECT_THROW(run_sweep(c.emb, c.labels, cfg), ConfigError);
}

TEST(Sweep, ExcludeEmptyScoresOnlyAnnotatedRows) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(150, 5, 4, 6.0, 1.0, 9));
  SweepConfig cfg;
  cfg.fields = {"slots"};
  cfg.k_list = {5};
  cfg.restarts = 2;
  cfg.exclude_empty = true;
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  const auto fit = best_of_restarts(c.emb.values(), 5, Algorithm::kmeans, 2, kDefaultMaxIters,
                                    cell_seed(0, SpeakerFilter::all, 5));
  std::vector<std::string> truth;
  std::vector<std::size_t> pred;
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    const auto& set = c.labels.rows()[i].fields.at("slots");
    if (set.empty()) continue;
    truth.push_back(join_label_set(set));
    pred.push_back(fit.labels[i]);
  }
  ASSERT_LT(truth.size(), 150u);
  const auto expect = compare(Partition::from_keys<std::string>(truth), Partition::from_labels(pred));
  EXPECT_DOUBLE_EQ(rows.at(0).anmi, expect.anmi);
  // Without the flag the empty set is a class of its own.
  cfg.exclude_empty = false;
  const auto with_empty = run_sweep(c.emb, c.labels, cfg);
  EXPECT_DOUBLE_EQ(with_empty.at(0).anmi, compare(label_partition(c.labels, "slots"), fit.partition).anmi);
}

TEST(Sweep, DiagnosticColumnBoundsChosenRestart) {
  const auto c = oracle::labeled_corpus(oracle::make_blobs(200, 4, 3, 3.0, 1.0, 10));
  auto cfg = intent_config({2, 4, 8});
  cfg.diagnostic = true;
  cfg.restarts = 5;
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  for (const auto& r : rows) {
    ASSERT_TRUE(r.anmi_best.has_value());
    EXPECT_GE(*r.anmi_best, r.anmi);
  }
  const auto lines = split_lines(format_report(rows));
  EXPECT_EQ(lines[0], std::string(kSweepHeader) + ",anmi_best");
  for (const auto& l : lines) EXPECT_EQ(count_commas(l), 11u);
}

TEST(Report, LayoutAndNumberFormat) {
  std::vector<SweepRow> rows;
  for (std::size_t k : {256u, 4u, 8u, 16u, 32u, 64u, 128u}) {
    SweepRow r;
    r.model_tag = "bert";
    r.task = "intent";
    r.speaker = "all";
    r.clusterer = "kmeans";
    r.k = k;
    r.chosen_seed = 12345678901ull;
    r.fit_score = 1234567.891;
    r.mi = 1.0 / 3.0;
    r.nmi = 0.5;
    r.anmi = -1e-7;
    r.wall_time_ms = 12.5;
    rows.push_back(r);
  }
  const auto lines = split_lines(format_report(rows));
  ASSERT_EQ(lines.size(), 8u);
  EXPECT_EQ(lines[0], "model,task,speaker,clusterer,k,seed,fit_score,mi,nmi,anmi,wall_time_ms");
  EXPECT_EQ(lines[1], "bert,intent,all,kmeans,4,12345678901,1.23457e+06,0.333333,0.5,-1e-07,12.5");
  EXPECT_EQ(lines[7].substr(0, 25), "bert,intent,all,kmeans,25");
  EXPECT_THROW(format_report({}), EmptyError);
}

TEST(Report, QuotesFieldsThatNeedIt) {
  SweepRow r;
  r.model_tag = "a,b";
  r.task = "t";
  r.speaker = "all";
  r.clusterer = "gmm";
  r.k = 2;
  EXPECT_EQ(split_lines(format_report({r}))[1], "\"a,b\",t,all,gmm,2,0,0,0,0,0,0");
}

TEST(Report, EmitWritesFile) {
  const auto dir = oracle::temp_dir("sweep_emit");
  const auto c = oracle::labeled_corpus(oracle::make_blobs(60, 3, 3, 6.0, 1.0, 11));
  auto cfg = intent_config({2, 3});
  cfg.restarts = 2;
  const auto rows = run_sweep(c.emb, c.labels, cfg);
  emit_report(rows, dir / "out.csv");
  std::ifstream in(dir / "out.csv", std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(text, format_report(rows));
  std::filesystem::remove_all(dir);
}

namespace {

struct ProbeSplits {
  oracle::LabeledCorpus train, valid, test;
  LabelTable all;
};

ProbeSplits probe_splits() {
  auto train = oracle::labeled_corpus(oracle::make_blobs(240, 4, 4, 12.0, 1.0, 21), "tr");
  auto valid = oracle::labeled_corpus(oracle::make_blobs(80, 4, 4, 12.0, 1.0, 22), "va");
  auto test = oracle::labeled_corpus(oracle::make_blobs(80, 4, 4, 12.0, 1.0, 23), "te");
  std::vector<LabelRow> rows;
  for (const auto* t : {&train.labels, &valid.labels, &test.labels})
    rows.insert(rows.end(), t->rows().begin(), t->rows().end());
  LabelTable all(train.labels.schema(), std::move(rows));
  return {std::move(train), std::move(valid), std::move(test), std::move(all)};
}

}  // namespace

TEST(ProbeTask, SingleLabelUsesSoftmaxAccuracy) {
  const auto s = probe_splits();
  ProbeTaskConfig cfg;
  cfg.field = "intent";
  cfg.model_tag = "m";
  const auto res = run_probe_task(s.train.emb, s.valid.emb, &s.test.emb, s.all, cfg);
  EXPECT_EQ(res.model.head, Head::softmax);
  EXPECT_FALSE(res.used_valid_fallback);
  ASSERT_EQ(res.rows.size(), 2u);
  EXPECT_EQ(res.rows[0].metric, "accuracy");
  EXPECT_EQ(res.rows[0].head, "softmax");
  EXPECT_EQ(res.rows[1].metric, "loss");
  EXPECT_GE(res.rows[0].value, 0.95);
  EXPECT_EQ(res.classes.size(), 4u);
}

TEST(ProbeTask, MultiLabelUsesSigmoidMicroF1) {
  const auto s = probe_splits();
  ProbeTaskConfig cfg;
  cfg.field = "slots";
  const auto res = run_probe_task(s.train.emb, s.valid.emb, &s.test.emb, s.all, cfg);
  EXPECT_EQ(res.model.head, Head::sigmoid);
  EXPECT_EQ(res.rows[0].metric, "micro_f1");
  EXPECT_EQ(res.classes.size(), 2u);
  EXPECT_TRUE(res.metrics.micro_f1.has_value());
}

TEST(ProbeTask, MissingTestFallsBackToValidAndSaysSo) {
  const auto s = probe_splits();
  ProbeTaskConfig cfg;
  cfg.field = "intent";
  cfg.train.max_epochs = 2;
  const auto res = run_probe_task(s.train.emb, s.valid.emb, nullptr, s.all, cfg);
  EXPECT_TRUE(res.used_valid_fallback);
  EXPECT_EQ(res.rows[0].metric, "accuracy_valid_fallback");
  EXPECT_EQ(res.rows[1].metric, "loss_valid_fallback");
}

TEST(ProbeTask, Float32AgreesInKind) {
  const auto s = probe_splits();
  ProbeTaskConfig cfg;
  cfg.field = "intent";
  cfg.float32 = true;
  const auto res = run_probe_task(s.train.emb, s.valid.emb, &s.test.emb, s.all, cfg);
  EXPECT_GE(*res.metrics.accuracy, 0.95);
}

TEST(ProbeTask, UnlabeledRowsAreAJoinError) {
  auto s = probe_splits();
  ProbeTaskConfig cfg;
  cfg.field = "intent";
  EXPECT_THROW(run_probe_task(s.train.emb, s.valid.emb, &s.test.emb, s.train.labels, cfg), JoinError);
}

TEST(ProbeReport, AppendWritesHeaderOnce) {
  const auto dir = oracle::temp_dir("probe_append");
  std::vector<ProbeReportRow> rows{{"m", "intent", "all", "softmax", "accuracy", 0.875}};
  append_probe_report(rows, dir / "p.csv");
  append_probe_report(rows, dir / "p.csv");
  std::ifstream in(dir / "p.csv", std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(text, "model,task,speaker,head,metric,value\nm,intent,all,softmax,accuracy,0.875\n"
                  "m,intent,all,softmax,accuracy,0.875\n");
  std::filesystem::remove_all(dir);
}
