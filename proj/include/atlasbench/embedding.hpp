#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "atlasbench/tensor.hpp"
#include "json.hpp"

namespace atlasbench::embedding {

enum class Metric { kEuclidean, kCosine };

std::string metric_name(Metric m);
Metric parse_metric(std::string_view name);

struct EmbeddingConfig {
  std::size_t n_neighbors = 15;
  double min_dist = 0.1;
  double spread = 1.0;
  std::size_t layout_epochs = 500;
  std::size_t negative_sample_rate = 5;
  double learning_rate = 1.0;
  Metric metric = Metric::kEuclidean;
  std::uint64_t seed = 0;

  /// Throws ContractError; `count` is the number of points to embed.
  void validate(std::size_t count) const;
  nlohmann::json to_json() const;
  static EmbeddingConfig from_json(const nlohmann::json& j);
};

/// Row-major [count, k] neighbor lists sorted by (distance, index).
struct KnnGraph {
  std::size_t count = 0;
  std::size_t k = 0;
  std::vector<std::int32_t> indices;
  std::vector<double> distances;

  std::span<const std::int32_t> neighbors(std::size_t i) const { return {indices.data() + i * k, k}; }
  std::span<const double> dists(std::size_t i) const { return {distances.data() + i * k, k}; }
};

/// Exact k nearest neighbors (self excluded, ties by index). `points` is
/// [count, dim]. Cosine distance is 1 - cos; zero rows count as distance 1
/// from everything.
KnnGraph knn_graph(const Tensor<float>& points, std::size_t k, Metric metric = Metric::kEuclidean);

/// Per-point directed membership strengths, aligned with the knn lists.
struct Memberships {
  std::vector<double> weights;  // [count, k]
  std::vector<double> sigmas;
  std::vector<double> rhos;
  std::size_t fallbacks = 0;  // points whose bisection did not converge
};
Memberships membership_strengths(const KnnGraph& knn);

struct AffinityEdge {
  std::int32_t i = 0;
  std::int32_t j = 0;  // i < j
  double weight = 0;
};

/// Symmetric sparse weights, stored once per unordered pair.
struct Affinities {
  std::size_t count = 0;
  std::vector<AffinityEdge> edges;
  std::size_t fallbacks = 0;

  /// 0 when the pair is absent.
  double weight(std::size_t i, std::size_t j) const;
};

/// Probabilistic union of the directed strengths: a + b - ab.
Affinities fuzzy_affinities(const KnnGraph& knn);
Affinities symmetrize(const KnnGraph& knn, const Memberships& m);

/// Low-dimensional kernel 1 / (1 + a d^(2b)).
struct Curve {
  double a = 1;
  double b = 1;
};
/// Least-squares fit to the min-dist/spread target curve on [0, 3 spread].
Curve fit_curve(double spread, double min_dist);
/// Sum of squared residuals of `c` against the target (used by the fit).
double curve_residual(const Curve& c, double spread, double min_dist);

struct Embedding2D {
  Tensor<float> coords;  // [count, 2]
  std::size_t source_count = 0;
  EmbeddingConfig config;
  Curve curve;
  std::size_t fallbacks = 0;
};

Embedding2D layout_2d(const Affinities& affinities, const EmbeddingConfig& config);

/// knn_graph -> fuzzy_affinities -> layout_2d.
Embedding2D embed(const Tensor<float>& points, const EmbeddingConfig& config);

/// Fraction of (point, neighbor) pairs among the k nearest 2-D neighbors
/// sharing the point's label.
double neighbor_purity(const Tensor<float>& coords, std::span<const std::int32_t> labels, std::size_t k);

/// CSV with header index,x,y,label (label column empty when no labels).
void save_embedding_csv(const std::filesystem::path& path, const Embedding2D& e,
                        std::span<const std::int32_t> labels = {});

}  // namespace atlasbench::embedding
