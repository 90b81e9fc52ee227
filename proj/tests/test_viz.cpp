#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "repprobe/cluster.hpp"
#include "repprobe/infometrics.hpp"
#include "repprobe/viz.hpp"

using namespace repprobe;

namespace {

double dist2d(const Matrix<double>& y, std::size_t a, std::size_t b) {
  return std::hypot(y(a, 0) - y(b, 0), y(a, 1) - y(b, 1));
}

double median_pairwise(const Matrix<double>& y) {
  std::vector<double> d;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = i + 1; j < y.rows(); ++j) d.push_back(dist2d(y, i, j));
  std::nth_element(d.begin(), d.begin() + static_cast<long>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

std::vector<std::string> make_ids(std::size_t n) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back("r" + std::to_string(i));
  return ids;
}

}  // namespace

TEST(Pca, FullRankKeepsCenteredData) {
  Matrix<double> x(3, 2, {1, 2, 3, 4, 5, 9});
  const auto r = pca_reduce(x, 5);
  EXPECT_EQ(r, Matrix<double>(3, 2, {-2, -3, 0, -1, 2, 4}));
}

TEST(Pca, AxesAreUncorrelatedAndOrderedByVariance) {
  std::mt19937_64 gen(1);
  std::normal_distribution<double> normal;
  Matrix<double> x(200, 6);
  for (std::size_t i = 0; i < 200; ++i)
    for (std::size_t j = 0; j < 6; ++j) x(i, j) = normal(gen) * static_cast<double>(j + 1) + (j == 0 ? 3.0 * x(i, 5) : 0);
  const auto r = pca_reduce(x, 3);
  ASSERT_EQ(r.cols(), 3u);
  double var[3] = {0, 0, 0}, cov01 = 0, total_in = 0, mean_in[6] = {};
  for (std::size_t i = 0; i < 200; ++i) {
    for (std::size_t c = 0; c < 3; ++c) var[c] += r(i, c) * r(i, c);
    cov01 += r(i, 0) * r(i, 1);
    for (std::size_t j = 0; j < 6; ++j) mean_in[j] += x(i, j) / 200.0;
  }
  for (std::size_t i = 0; i < 200; ++i)
    for (std::size_t j = 0; j < 6; ++j) total_in += (x(i, j) - mean_in[j]) * (x(i, j) - mean_in[j]);
  EXPECT_GT(var[0], var[1]);
  EXPECT_GT(var[1], var[2]);
  EXPECT_NEAR(cov01 / var[0], 0.0, 1e-10);
  EXPECT_LT(var[0] + var[1] + var[2], total_in);
}

TEST(Affinities, HitTargetPerplexity) {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> normal;
  Matrix<double> x(120, 5);
  for (auto& v : x.flat()) v = normal(gen);
  const auto d = detail::pairwise_sq_dist(x);
  for (double perp : {2.0, 5.0, 10.0, 30.0}) {
    const auto a = conditional_affinities(d, perp);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      EXPECT_NEAR(a.achieved_perplexity[i], perp, 1e-3) << "row " << i;
      // The achieved value is the entropy of the row as stored.
      double h = 0, s = 0;
      for (double p : a.p.row(i)) {
        s += p;
        if (p > 0) h -= p * std::log(p);
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
      EXPECT_NEAR(std::exp(h), perp, 1e-3);
      EXPECT_EQ(a.p(i, i), 0.0);
    }
  }
}

TEST(Tsne, ShapeAndHistory) {
  const auto b = oracle::make_blobs(40, 2, 5, 8.0, 1.0, 3);
  TsneConfig cfg;
  cfg.perplexity = 5;
  cfg.iters = 300;
  const auto p = tsne_project(b.x, cfg);
  EXPECT_EQ(p.coords.rows(), 40u);
  EXPECT_EQ(p.coords.cols(), 2u);
  EXPECT_EQ(p.kl_history.size(), 300u);
  EXPECT_TRUE(p.warnings.empty());
  EXPECT_TRUE(all_finite(p.coords.flat()));
}

TEST(Tsne, KlNonIncreasingAfterExaggeration) {
  const auto b = oracle::make_blobs(150, 3, 10, 8.0, 1.0, 4);
  const auto p = tsne_project(b.x, TsneConfig{});
  ASSERT_EQ(p.kl_history.size(), 1000u);
  for (std::size_t it = 250; it < p.kl_history.size(); ++it)
    ASSERT_LE(p.kl_history[it], p.kl_history[it - 1]) << "iteration " << it;
  EXPECT_LT(p.kl_history.back(), p.kl_history[249]);
}

TEST(Tsne, SeparatesBlobs) {
  const auto b = oracle::make_blobs(150, 3, 10, 8.0, 1.0, 5);
  const auto p = tsne_project(b.x, TsneConfig{});
  const auto fit = best_of_restarts(p.coords, 3, Algorithm::kmeans);
  EXPECT_GE(anmi(contingency(Partition::from_labels(b.labels), fit.partition)), 0.95);
}

TEST(Tsne, DuplicatedRowsLandTogether) {
  auto b = oracle::make_blobs(80, 3, 6, 6.0, 1.0, 6);
  Matrix<double> x(90, 6);
  for (std::size_t i = 0; i < 80; ++i) std::ranges::copy(b.x.row(i), x.row(i).begin());
  for (std::size_t i = 0; i < 10; ++i) std::ranges::copy(b.x.row(7 * i), x.row(80 + i).begin());
  TsneConfig cfg;
  cfg.perplexity = 10;
  const auto p = tsne_project(x, cfg);
  const double med = median_pairwise(p.coords);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_LT(dist2d(p.coords, 7 * i, 80 + i), 0.01 * med) << "pair " << i;
}

TEST(Tsne, BitIdenticalReruns) {
  const auto b = oracle::make_blobs(60, 3, 70, 8.0, 1.0, 7);  // exercises the PCA path
  TsneConfig cfg;
  cfg.perplexity = 8;
  cfg.iters = 400;
  cfg.seed = 42;
  const auto a = tsne_project(b.x, cfg);
  const auto c = tsne_project(b.x, cfg);
  EXPECT_EQ(a.coords, c.coords);
  EXPECT_EQ(a.kl_history, c.kl_history);
  cfg.seed = 43;
  EXPECT_NE(tsne_project(b.x, cfg).coords, a.coords);
}

TEST(Tsne, TooFewRowsAndBadConfig) {
  EXPECT_THROW(tsne_project(Matrix<double>(2, 3, 1.0)), ConfigError);
  TsneConfig cfg;
  cfg.perplexity = 0;
  EXPECT_THROW(tsne_project(Matrix<double>(5, 3, 1.0), cfg), ConfigError);
  Matrix<double> bad(4, 2, 0.0);
  bad(1, 1) = NAN;
  EXPECT_THROW(tsne_project(bad), ValueError);
}

TEST(Tsne, PerplexityShrinksForSmallInputs) {
  const auto b = oracle::make_blobs(30, 2, 3, 5.0, 1.0, 8);
  TsneConfig cfg;
  cfg.iters = 50;
  const auto p = tsne_project(b.x, cfg);
  EXPECT_EQ(p.perplexity, 9.0);
  ASSERT_EQ(p.warnings.size(), 1u);
  const auto tiny = tsne_project(Matrix<double>(3, 1, {0, 1, 3}), cfg);
  EXPECT_EQ(tiny.perplexity, 1.0);
}

TEST(Projection, CsvLayout) {
  Projection p;
  p.coords = Matrix<double>(2, 2, {0.5, -1.25, 1e-7, 3});
  const std::vector<std::string> ids{"a", "b,c"}, labels{"x", "y"};
  EXPECT_EQ(format_projection(p, ids, labels), "id,x,y,label\na,0.5,-1.25,x\n\"b,c\",1e-07,3,y\n");
  EXPECT_EQ(format_projection(p, ids, {}), "id,x,y,label\na,0.5,-1.25,\n\"b,c\",1e-07,3,\n");
  EXPECT_THROW(format_projection(p, std::vector<std::string>{"a"}, {}), ShapeError);
}

namespace {

struct ExemplarFixture {
  oracle::Blobs blobs = oracle::make_blobs(200, 8, 8, 10.0, 1.0, 9);
  std::vector<std::string> ids = make_ids(200);
  std::unordered_map<std::string, std::string> texts;
  ClusterResult fit;

  ExemplarFixture() {
    for (const auto& id : ids) texts[id] = "text of " + id;
    fit = best_of_restarts(blobs.x, 8, Algorithm::kmeans);
  }
};

}  // namespace

TEST(Exemplars, DefaultIsFiveByFive) {
  ExemplarFixture f;
  const auto blocks = exemplars(f.fit, f.blobs.x, f.ids, f.texts);
  ASSERT_EQ(blocks.size(), 5u);
  std::set<std::size_t> clusters;
  for (const auto& b : blocks) {
    EXPECT_EQ(b.ids.size(), 5u);
    EXPECT_TRUE(clusters.insert(b.cluster_id).second);
    std::set<std::string> uniq(b.ids.begin(), b.ids.end());
    EXPECT_EQ(uniq.size(), b.ids.size());
    for (std::size_t i = 0; i < b.ids.size(); ++i) {
      EXPECT_EQ(b.texts[i], "text of " + b.ids[i]);
      const auto row = static_cast<std::size_t>(std::stoul(b.ids[i].substr(1)));
      EXPECT_EQ(f.fit.labels[row], b.cluster_id);
    }
  }
}

TEST(Exemplars, DeterministicPerSeed) {
  ExemplarFixture f;
  ExemplarConfig cfg;
  cfg.seed = 3;
  const auto a = exemplars(f.fit, f.blobs.x, f.ids, f.texts, cfg);
  const auto b = exemplars(f.fit, f.blobs.x, f.ids, f.texts, cfg);
  EXPECT_EQ(format_exemplars(a), format_exemplars(b));
  cfg.seed = 4;
  EXPECT_NE(format_exemplars(exemplars(f.fit, f.blobs.x, f.ids, f.texts, cfg)), format_exemplars(a));
}

TEST(Exemplars, TruncatesToAvailable) {
  ExemplarFixture f;
  ExemplarConfig cfg;
  cfg.clusters_to_show = 50;
  cfg.samples_per_cluster = 1000;
  const auto blocks = exemplars(f.fit, f.blobs.x, f.ids, f.texts, cfg);
  ASSERT_EQ(blocks.size(), 8u);
  std::size_t total = 0;
  for (const auto& b : blocks) total += b.ids.size();
  EXPECT_EQ(total, 200u);
}

TEST(Exemplars, NearestCentroidListsClosestMembers) {
  ExemplarFixture f;
  ExemplarConfig cfg;
  cfg.mode = ExemplarMode::nearest_centroid;
  cfg.samples_per_cluster = 3;
  const auto blocks = exemplars(f.fit, f.blobs.x, f.ids, f.texts, cfg);
  const auto& centers = f.fit.centers();
  for (const auto& b : blocks) {
    std::vector<std::pair<double, std::size_t>> members;
    for (std::size_t i = 0; i < 200; ++i)
      if (f.fit.labels[i] == b.cluster_id) {
        double d = 0;
        for (std::size_t j = 0; j < 8; ++j) d += std::pow(f.blobs.x(i, j) - centers(b.cluster_id, j), 2);
        members.emplace_back(d, i);
      }
    std::ranges::sort(members);
    ASSERT_EQ(b.ids.size(), 3u);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_EQ(b.ids[r], f.ids[members[r].second]);
  }
}

TEST(Exemplars, MissingTextIsLookupError) {
  ExemplarFixture f;
  f.texts.erase("r0");
  ExemplarConfig cfg;
  cfg.clusters_to_show = 8;
  cfg.samples_per_cluster = 200;
  EXPECT_THROW(exemplars(f.fit, f.blobs.x, f.ids, f.texts, cfg), LookupError);
}

TEST(Exemplars, TextLayout) {
  const std::vector<ExemplarBlock> blocks{{2, {"a", "b"}, {"hello", "there"}}, {5, {"c"}, {"bye"}}};
  EXPECT_EQ(format_exemplars(blocks), "cluster 2\nhello\nthere\n\ncluster 5\nbye\n");
  EXPECT_THROW(parse_exemplar_mode("first"), ConfigError);
}
