#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "atlasbench/embedding.hpp"
#include "support/fixtures.hpp"

namespace atlasbench::embedding {
namespace {

// Exhaustive double-precision search with (distance, index) ordering.
std::vector<std::int32_t> oracle_neighbors(const Tensor<float>& p, std::size_t i, std::size_t k, Metric metric) {
  const std::size_t n = p.dim(0), dim = p.dim(1);
  std::vector<std::pair<long double, std::int32_t>> all;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    long double d = 0, xx = 0, yy = 0, xy = 0;
    for (std::size_t c = 0; c < dim; ++c) {
      const long double a = p.at(i, c), b = p.at(j, c);
      d += (a - b) * (a - b);
      xx += a * a;
      yy += b * b;
      xy += a * b;
    }
    if (metric == Metric::kCosine) d = (xx == 0 || yy == 0) ? 1.0L : 1.0L - xy / std::sqrt(xx * yy);
    all.emplace_back(d, static_cast<std::int32_t>(j));
  }
  std::sort(all.begin(), all.end());
  std::vector<std::int32_t> out;
  for (std::size_t r = 0; r < k; ++r) out.push_back(all[r].second);
  return out;
}

Tensor<float> random_cloud(std::size_t n, std::size_t dim, std::uint64_t seed, double scale = 1.0) {
  Tensor<float> t({n, dim});
  Rng rng(seed);
  for (auto& v : t.storage()) v = static_cast<float>(rng.normal() * scale);
  return t;
}

// Clusters with centers on scaled basis vectors (pairwise distance `gap`).
Tensor<float> clusters(std::size_t per, std::size_t groups, std::size_t dim, double sigma, double gap,
                       std::uint64_t seed, std::vector<std::int32_t>& labels) {
  Tensor<float> t({per * groups, dim});
  Rng rng(seed);
  labels.clear();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t p = 0; p < per; ++p) {
      const std::size_t row = g * per + p;
      for (std::size_t c = 0; c < dim; ++c) {
        t.at(row, c) = static_cast<float>(rng.normal() * sigma + (c == g ? gap / std::sqrt(2.0) : 0.0));
      }
      labels.push_back(static_cast<std::int32_t>(g));
    }
  }
  return t;
}

TEST(Knn, PointsOnALine) {
  const Tensor<float> p({4, 1}, std::vector<float>{0, 1, 2, 3});
  const auto g = knn_graph(p, 2);
  EXPECT_EQ(std::vector<std::int32_t>(g.neighbors(0).begin(), g.neighbors(0).end()), (std::vector<std::int32_t>{1, 2}));
  EXPECT_DOUBLE_EQ(g.dists(0)[1], 2.0);
  // Point 1: 0 and 2 tie at distance 1, index breaks the tie.
  EXPECT_EQ(g.neighbors(1)[0], 0);
  EXPECT_EQ(g.neighbors(1)[1], 2);
}

TEST(Knn, DuplicatesTieBreakByIndex) {
  const Tensor<float> p({5, 2}, std::vector<float>{1, 1, 1, 1, 1, 1, 5, 5, 1, 1});
  const auto g = knn_graph(p, 3);
  EXPECT_EQ(std::vector<std::int32_t>(g.neighbors(1).begin(), g.neighbors(1).end()), (std::vector<std::int32_t>{0, 2, 4}));
  for (double d : g.dists(1)) EXPECT_EQ(d, 0.0);
}

TEST(Knn, MatchesExhaustiveOracle) {
  for (auto metric : {Metric::kEuclidean, Metric::kCosine}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const auto p = random_cloud(100, 8, seed);
      const auto g = knn_graph(p, 10, metric);
      for (std::size_t i = 0; i < 100; ++i) {
        const auto expect = oracle_neighbors(p, i, 10, metric);
        ASSERT_EQ(std::vector<std::int32_t>(g.neighbors(i).begin(), g.neighbors(i).end()), expect)
            << metric_name(metric) << " seed " << seed << " point " << i;
      }
    }
  }
}

TEST(Knn, ExactInHighDimensionWithOffset) {
  // Large common offset stresses the float screening bound.
  auto p = random_cloud(300, 512, 7, 0.01);
  for (std::size_t i = 0; i < 300; ++i)
    for (std::size_t c = 0; c < 512; ++c) p.at(i, c) += 3.0f;
  const auto g = knn_graph(p, 15);
  for (std::size_t i = 0; i < 300; i += 7) {
    const auto expect = oracle_neighbors(p, i, 15, Metric::kEuclidean);
    ASSERT_EQ(std::vector<std::int32_t>(g.neighbors(i).begin(), g.neighbors(i).end()), expect) << i;
  }
}

TEST(Knn, KMustBeBelowCount) {
  const auto p = random_cloud(5, 2, 1);
  EXPECT_THROW(knn_graph(p, 5), ContractError);
  EXPECT_THROW(knn_graph(p, 0), ContractError);
}

TEST(Affinity, NearestWeightOneAndSmoothDegree) {
  const auto p = random_cloud(200, 6, 3);
  const auto g = knn_graph(p, 15);
  const auto m = membership_strengths(g);
  EXPECT_EQ(m.fallbacks, 0u);
  const double target = std::log2(15.0);
  for (std::size_t i = 0; i < 200; ++i) {
    EXPECT_DOUBLE_EQ(m.weights[i * 15], 1.0);
    double s = 0;
    for (std::size_t r = 0; r < 15; ++r) s += m.weights[i * 15 + r];
    EXPECT_NEAR(s, target, 1e-3);
  }
}

TEST(Affinity, UnionFormula) {
  KnnGraph g;
  g.count = 3;
  g.k = 1;
  g.indices = {1, 0, 0};
  g.distances = {1, 1, 1};
  Memberships m;
  m.weights = {0.5, 0.5, 1.0};
  const auto a = symmetrize(g, m);
  EXPECT_DOUBLE_EQ(a.weight(0, 1), 0.75);
  EXPECT_DOUBLE_EQ(a.weight(1, 0), 0.75);
  EXPECT_DOUBLE_EQ(a.weight(0, 2), 1.0);
  EXPECT_DOUBLE_EQ(a.weight(1, 2), 0.0);
}

TEST(Affinity, SymmetricBoundedZeroDiagonal) {
  const auto p = random_cloud(150, 4, 9);
  const auto g = knn_graph(p, 10);
  const auto a = fuzzy_affinities(g);
  for (const auto& e : a.edges) {
    EXPECT_LT(e.i, e.j);
    EXPECT_GT(e.weight, 0.0);
    EXPECT_LE(e.weight, 1.0);
    EXPECT_EQ(a.weight(e.i, e.j), a.weight(e.j, e.i));
  }
  for (std::size_t i = 0; i < 150; ++i) EXPECT_EQ(a.weight(i, i), 0.0);
}

TEST(Affinity, AllDuplicateNeighborsFallBack) {
  const Tensor<float> p({4, 1}, std::vector<float>{2, 2, 2, 2});
  const auto m = membership_strengths(knn_graph(p, 3));
  EXPECT_EQ(m.fallbacks, 4u);
  for (double w : m.weights) EXPECT_EQ(w, 1.0);
}

TEST(Curve, FitIsALocalMinimum) {
  for (double md : {0.0, 0.1, 0.5}) {
    const auto c = fit_curve(1.0, md);
    const double base = curve_residual(c, 1.0, md);
    for (double da : {-1e-3, 1e-3}) {
      EXPECT_GE(curve_residual({c.a * (1 + da), c.b}, 1.0, md), base) << md;
      EXPECT_GE(curve_residual({c.a, c.b * (1 + da)}, 1.0, md), base) << md;
    }
    EXPECT_GT(c.a, 0);
    EXPECT_GT(c.b, 0);
  }
}

EmbeddingConfig quick_config(std::uint64_t seed) {
  EmbeddingConfig c;
  c.seed = seed;
  c.layout_epochs = 200;
  return c;
}

TEST(Layout, SinglePointAtOrigin) {
  const Tensor<float> p({1, 3}, std::vector<float>{4, 5, 6});
  const auto e = embed(p, EmbeddingConfig{});
  EXPECT_EQ(e.coords.at(0, 0), 0.0f);
  EXPECT_EQ(e.coords.at(0, 1), 0.0f);
}

TEST(Layout, DeterministicForSeed) {
  std::vector<std::int32_t> labels;
  const auto p = clusters(50, 3, 16, 0.1, 5, 2, labels);
  const auto a = embed(p, quick_config(4));
  const auto b = embed(p, quick_config(4));
  const auto c = embed(p, quick_config(5));
  EXPECT_EQ(a.coords, b.coords);
  EXPECT_NE(a.coords, c.coords);
}

TEST(Layout, TwoClustersSeparate) {
  // Intra-cluster radius about sqrt(10); centers 10x that apart.
  std::vector<std::int32_t> labels;
  const double radius = std::sqrt(10.0);
  const auto p = clusters(200, 2, 10, 1.0, 10 * radius, 6, labels);
  const auto e = embed(p, quick_config(1));
  double cx[2] = {0, 0}, cy[2] = {0, 0};
  for (std::size_t i = 0; i < 400; ++i) {
    cx[labels[i]] += e.coords.at(i, 0) / 200.0;
    cy[labels[i]] += e.coords.at(i, 1) / 200.0;
  }
  double intra = 0;
  for (std::size_t i = 0; i < 400; ++i) intra += std::hypot(e.coords.at(i, 0) - cx[labels[i]], e.coords.at(i, 1) - cy[labels[i]]);
  intra /= 400;
  EXPECT_GT(std::hypot(cx[0] - cx[1], cy[0] - cy[1]), 3 * intra);
}

TEST(Layout, ThreeClusterPurityAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::vector<std::int32_t> labels;
    const auto p = clusters(100, 3, 64, 0.1, 5, 100 + seed, labels);
    EmbeddingConfig c;
    c.seed = seed;
    const auto e = embed(p, c);
    ASSERT_TRUE(e.coords.all_finite());
    EXPECT_GE(neighbor_purity(e.coords, labels, 10), 0.95) << seed;
  }
}

TEST(Layout, DuplicateRowsLandTogether) {
  std::vector<std::int32_t> labels;
  auto p = clusters(100, 3, 32, 0.3, 5, 8, labels);
  // Rows 10, 120 and 250 get an exact copy at the end.
  Tensor<float> q({303, 32});
  std::copy_n(p.data(), p.numel(), q.data());
  const std::size_t dups[3] = {10, 120, 250};
  for (std::size_t d = 0; d < 3; ++d) std::copy_n(p.data() + dups[d] * 32, 32, q.data() + (300 + d) * 32);
  const auto e = embed(q, EmbeddingConfig{});
  float lo[2] = {1e30f, 1e30f}, hi[2] = {-1e30f, -1e30f};
  for (std::size_t i = 0; i < 303; ++i) {
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], e.coords.at(i, a));
      hi[a] = std::max(hi[a], e.coords.at(i, a));
    }
  }
  const double diameter = std::hypot(hi[0] - lo[0], hi[1] - lo[1]);
  for (std::size_t d = 0; d < 3; ++d) {
    const double dist = std::hypot(e.coords.at(dups[d], 0) - e.coords.at(300 + d, 0),
                                   e.coords.at(dups[d], 1) - e.coords.at(300 + d, 1));
    EXPECT_LE(dist, 1e-2 * diameter) << dups[d];
  }
}

TEST(Layout, ConfigValidation) {
  const auto p = random_cloud(10, 2, 1);
  EmbeddingConfig c;
  EXPECT_THROW(embed(p, c), ContractError);  // 15 neighbors, 10 points
  c.n_neighbors = 5;
  c.min_dist = 1.0;
  EXPECT_THROW(embed(p, c), ContractError);
  c.min_dist = 0.1;
  c.n_neighbors = 1;
  EXPECT_THROW(embed(p, c), ContractError);
}

TEST(Export, CsvHasHeaderAndRows) {
  testing::TempDir dir("emb");
  Embedding2D e;
  e.coords = Tensor<float>({2, 2}, std::vector<float>{1.5f, -2, 3, 4});
  const std::vector<std::int32_t> labels{7, 8};
  save_embedding_csv(dir / "e.csv", e, labels);
  std::ifstream is(dir / "e.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "index,x,y,label");
  std::getline(is, line);
  EXPECT_EQ(line, "0,1.5,-2,7");
  std::getline(is, line);
  EXPECT_EQ(line, "1,3,4,8");
}

TEST(Config, JsonRoundTrip) {
  EmbeddingConfig c;
  c.metric = Metric::kCosine;
  c.seed = 99;
  c.min_dist = 0.25;
  const auto back = EmbeddingConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
}

}  // namespace
}  // namespace atlasbench::embedding
