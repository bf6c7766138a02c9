#include "atlasbench/embedding.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "atlasbench/parallel.hpp"

namespace atlasbench::embedding {

namespace fs = std::filesystem;

std::string metric_name(Metric m) { return m == Metric::kEuclidean ? "euclidean" : "cosine"; }

Metric parse_metric(std::string_view name) {
  if (name == "euclidean") return Metric::kEuclidean;
  if (name == "cosine") return Metric::kCosine;
  throw ContractError("unknown metric '" + std::string(name) + "' (expected euclidean or cosine)");
}

void EmbeddingConfig::validate(std::size_t count) const {
  if (n_neighbors < 2) throw ContractError("embedding: n-neighbors must be >= 2");
  if (count > 1 && n_neighbors >= count) {
    throw ContractError("embedding: n-neighbors " + std::to_string(n_neighbors) + " must be below the point count " +
                        std::to_string(count));
  }
  if (!(min_dist >= 0 && min_dist < 1)) throw ContractError("embedding: min-dist must be in [0, 1)");
  if (!(spread > 0)) throw ContractError("embedding: spread must be positive");
  if (layout_epochs == 0) throw ContractError("embedding: layout-epochs must be positive");
  if (negative_sample_rate == 0) throw ContractError("embedding: negative-sample-rate must be positive");
  if (!(learning_rate > 0)) throw ContractError("embedding: learning rate must be positive");
}

nlohmann::json EmbeddingConfig::to_json() const {
  return {{"n_neighbors", n_neighbors}, {"min_dist", min_dist},
          {"spread", spread},           {"layout_epochs", layout_epochs},
          {"negative_sample_rate", negative_sample_rate}, {"learning_rate", learning_rate},
          {"metric", metric_name(metric)}, {"seed", seed}};
}

EmbeddingConfig EmbeddingConfig::from_json(const nlohmann::json& j) {
  EmbeddingConfig c;
  c.n_neighbors = j.value("n_neighbors", c.n_neighbors);
  c.min_dist = j.value("min_dist", c.min_dist);
  c.spread = j.value("spread", c.spread);
  c.layout_epochs = j.value("layout_epochs", c.layout_epochs);
  c.negative_sample_rate = j.value("negative_sample_rate", c.negative_sample_rate);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.metric = parse_metric(j.value("metric", std::string("euclidean")));
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double exact_distance(const float* x, const float* y, std::size_t dim, Metric metric, double nx, double ny) {
  if (metric == Metric::kEuclidean) {
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) {
      const double t = static_cast<double>(x[d]) - y[d];
      s += t * t;
    }
    return std::sqrt(s);
  }
  if (nx == 0 || ny == 0) return 1.0;
  double dot = 0;
  for (std::size_t d = 0; d < dim; ++d) dot += static_cast<double>(x[d]) * y[d];
  return std::max(0.0, 1.0 - dot / (nx * ny));
}

}  // namespace

KnnGraph knn_graph(const Tensor<float>& points, std::size_t k, Metric metric) {
  if (points.rank() != 2) throw DimensionError("knn_graph: expected [count, dim], got " + shape_str(points.shape()));
  const std::size_t n = points.dim(0), dim = points.dim(1);
  if (k == 0 || k >= n) {
    throw ContractError("knn_graph: k = " + std::to_string(k) + " must be in [1, " + std::to_string(n) + ")");
  }

  // Exact norms (double) and the float matrix used for screening.
  std::vector<double> norm2(n);
  RowMat screen(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    const float* x = points.data() + i * dim;
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) s += static_cast<double>(x[d]) * x[d];
    norm2[i] = s;
    const double scale = metric == Metric::kCosine ? (s > 0 ? 1.0 / std::sqrt(s) : 0.0) : 1.0;
    for (std::size_t d = 0; d < dim; ++d) screen(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) =
        static_cast<float>(x[d] * scale);
  }
  std::vector<double> norm(n);
  for (std::size_t i = 0; i < n; ++i) norm[i] = std::sqrt(norm2[i]);

  // Bound on the float screening error of a squared distance (or of 1 - cos).
  const double u = std::ldexp(1.0, -24);
  const double growth = static_cast<double>(dim + 8) * u;

  KnnGraph g;
  g.count = n;
  g.k = k;
  g.indices.resize(n * k);
  g.distances.resize(n * k);

  constexpr std::size_t kBlock = 256;
  parallel_for(n, kBlock, [&](std::size_t begin, std::size_t end) {
    const auto rows = static_cast<Eigen::Index>(end - begin);
    RowMat dots = screen.middleRows(static_cast<Eigen::Index>(begin), rows) * screen.transpose();
    std::vector<double> upper(n), lower(n);
    std::vector<std::pair<double, std::int32_t>> cand;
    for (std::size_t i = begin; i < end; ++i) {
      const float* drow = dots.data() + (i - begin) * n;
      for (std::size_t j = 0; j < n; ++j) {
        double est, tol;
        if (metric == Metric::kEuclidean) {
          est = norm2[i] + norm2[j] - 2.0 * drow[j];
          tol = growth * (norm2[i] + norm2[j]) + 1e-30;
        } else {
          const bool zero = norm2[i] == 0 || norm2[j] == 0;
          est = zero ? 1.0 : 1.0 - drow[j];
          tol = zero ? 0.0 : 2.0 * growth + 1e-12;
        }
        upper[j] = est + tol;
        lower[j] = est - tol;
      }
      upper[i] = std::numeric_limits<double>::infinity();
      std::vector<double> sorted_upper = upper;
      std::nth_element(sorted_upper.begin(), sorted_upper.begin() + static_cast<std::ptrdiff_t>(k - 1),
                       sorted_upper.end());
      const double cutoff = sorted_upper[k - 1];
      cand.clear();
      const float* x = points.data() + i * dim;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i || lower[j] > cutoff) continue;
        cand.emplace_back(exact_distance(x, points.data() + j * dim, dim, metric, norm[i], norm[j]),
                          static_cast<std::int32_t>(j));
      }
      std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
      for (std::size_t r = 0; r < k; ++r) {
        g.distances[i * k + r] = cand[r].first;
        g.indices[i * k + r] = cand[r].second;
      }
    }
  });
  return g;
}

Memberships membership_strengths(const KnnGraph& knn) {
  const std::size_t n = knn.count, k = knn.k;
  const double target = std::log2(static_cast<double>(k));
  Memberships m;
  m.weights.resize(n * k);
  m.sigmas.resize(n);
  m.rhos.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto d = knn.dists(i);
    const double rho = d[0];
    auto psum = [&](double sigma) {
      double s = 0;
      for (double v : d) s += std::exp(-std::max(0.0, v - rho) / sigma);
      return s;
    };
    double lo = 0, hi = std::numeric_limits<double>::infinity(), mid = 1;
    bool converged = false;
    for (int it = 0; it < 64; ++it) {
      const double s = psum(mid);
      if (std::abs(s - target) < 1e-5) {
        converged = true;
        break;
      }
      if (s > target) {
        hi = mid;
        mid = (lo + hi) / 2;
      } else {
        lo = mid;
        mid = std::isinf(hi) ? mid * 2 : (lo + hi) / 2;
      }
    }
    if (!converged) {
      ++m.fallbacks;
      mid = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(k);
      if (!(mid > 0)) mid = 1.0;
    }
    m.sigmas[i] = mid;
    m.rhos[i] = rho;
    for (std::size_t r = 0; r < k; ++r) m.weights[i * k + r] = std::exp(-std::max(0.0, d[r] - rho) / mid);
  }
  return m;
}

Affinities symmetrize(const KnnGraph& knn, const Memberships& m) {
  struct Directed {
    std::uint64_t key;
    bool forward;  // i < j as stored
    double w;
  };
  std::vector<Directed> all;
  all.reserve(knn.count * knn.k);
  for (std::size_t i = 0; i < knn.count; ++i) {
    for (std::size_t r = 0; r < knn.k; ++r) {
      const auto j = static_cast<std::size_t>(knn.indices[i * knn.k + r]);
      if (j == i) continue;
      const std::uint64_t lo = std::min(i, j), hi = std::max(i, j);
      all.push_back({(lo << 32) | hi, i < j, m.weights[i * knn.k + r]});
    }
  }
  std::sort(all.begin(), all.end(), [](const Directed& a, const Directed& b) {
    return a.key != b.key ? a.key < b.key : a.forward > b.forward;
  });
  Affinities out;
  out.count = knn.count;
  out.fallbacks = m.fallbacks;
  for (std::size_t p = 0; p < all.size();) {
    double a = 0, b = 0;
    const auto key = all[p].key;
    for (; p < all.size() && all[p].key == key; ++p) (all[p].forward ? a : b) = all[p].w;
    const double w = a + b - a * b;
    if (w > 0) out.edges.push_back({static_cast<std::int32_t>(key >> 32), static_cast<std::int32_t>(key & 0xffffffffu), w});
  }
  return out;
}

Affinities fuzzy_affinities(const KnnGraph& knn) { return symmetrize(knn, membership_strengths(knn)); }

double Affinities::weight(std::size_t i, std::size_t j) const {
  if (i == j) return 0;
  const auto lo = static_cast<std::int32_t>(std::min(i, j)), hi = static_cast<std::int32_t>(std::max(i, j));
  auto it = std::lower_bound(edges.begin(), edges.end(), std::pair{lo, hi}, [](const AffinityEdge& e, const auto& p) {
    return e.i != p.first ? e.i < p.first : e.j < p.second;
  });
  return it != edges.end() && it->i == lo && it->j == hi ? it->weight : 0.0;
}

namespace {

constexpr std::size_t kCurveSamples = 300;

double curve_target(double x, double spread, double min_dist) {
  return x < min_dist ? 1.0 : std::exp(-(x - min_dist) / spread);
}

}  // namespace

double curve_residual(const Curve& c, double spread, double min_dist) {
  double sse = 0;
  for (std::size_t s = 0; s < kCurveSamples; ++s) {
    const double x = 3.0 * spread * static_cast<double>(s) / (kCurveSamples - 1);
    const double f = 1.0 / (1.0 + c.a * std::pow(x, 2 * c.b));
    const double r = f - curve_target(x, spread, min_dist);
    sse += r * r;
  }
  return sse;
}

Curve fit_curve(double spread, double min_dist) {
  Curve c{1.0, 1.0};
  double lambda = 1e-3;
  double cost = curve_residual(c, spread, min_dist);
  for (int it = 0; it < 500; ++it) {
    Eigen::Matrix2d jtj = Eigen::Matrix2d::Zero();
    Eigen::Vector2d jtr = Eigen::Vector2d::Zero();
    for (std::size_t s = 0; s < kCurveSamples; ++s) {
      const double x = 3.0 * spread * static_cast<double>(s) / (kCurveSamples - 1);
      if (x == 0) continue;
      const double p = std::pow(x, 2 * c.b);
      const double f = 1.0 / (1.0 + c.a * p);
      const double r = f - curve_target(x, spread, min_dist);
      const Eigen::Vector2d jac(-p * f * f, -c.a * p * 2.0 * std::log(x) * f * f);
      jtj += jac * jac.transpose();
      jtr += jac * r;
    }
    Eigen::Matrix2d damped = jtj;
    damped.diagonal() *= 1.0 + lambda;
    const Eigen::Vector2d step = damped.ldlt().solve(-jtr);
    const Curve trial{c.a + step[0], c.b + step[1]};
    const double trial_cost = trial.a > 0 && trial.b > 0 ? curve_residual(trial, spread, min_dist)
                                                         : std::numeric_limits<double>::infinity();
    if (trial_cost < cost) {
      const double gain = cost - trial_cost;
      c = trial;
      cost = trial_cost;
      lambda = std::max(lambda / 10, 1e-12);
      if (gain < 1e-15 * std::max(1.0, cost)) break;
    } else {
      lambda *= 10;
      if (lambda > 1e12) break;
    }
  }
  return c;
}

Embedding2D layout_2d(const Affinities& aff, const EmbeddingConfig& config) {
  config.validate(0);
  const std::size_t n = aff.count;
  Embedding2D out;
  out.source_count = n;
  out.config = config;
  out.fallbacks = aff.fallbacks;
  out.curve = fit_curve(config.spread, config.min_dist);
  if (n == 0) throw ContractError("layout_2d: no points");
  out.coords = Tensor<float>({n, 2});
  if (n == 1) return out;

  Rng rng(derive_seed({config.seed, 0x6c61796f7574}));
  for (auto& v : out.coords.storage()) v = static_cast<float>(rng.uniform(-10, 10));

  // Both directions of every pair, pruned below max/epochs.
  double max_w = 0;
  for (const auto& e : aff.edges) max_w = std::max(max_w, e.weight);
  const double epochs = static_cast<double>(config.layout_epochs);
  std::vector<std::int32_t> head, tail;
  std::vector<double> per_sample;
  for (const auto& e : aff.edges) {
    if (e.weight < max_w / epochs) continue;
    for (int dir = 0; dir < 2; ++dir) {
      head.push_back(dir ? e.j : e.i);
      tail.push_back(dir ? e.i : e.j);
      per_sample.push_back(max_w / e.weight);
    }
  }
  const std::size_t m = head.size();
  const double neg_rate = static_cast<double>(config.negative_sample_rate);
  std::vector<double> next_sample = per_sample;
  std::vector<double> per_negative(m), next_negative(m);
  for (std::size_t e = 0; e < m; ++e) next_negative[e] = per_negative[e] = per_sample[e] / neg_rate;

  const double a = out.curve.a, b = out.curve.b;
  float* y = out.coords.data();
  auto clip = [](double g) { return std::clamp(g, -4.0, 4.0); };
  for (std::size_t epoch = 0; epoch < config.layout_epochs; ++epoch) {
    const double alpha = config.learning_rate * (1.0 - static_cast<double>(epoch) / epochs);
    const double now = static_cast<double>(epoch);
    for (std::size_t e = 0; e < m; ++e) {
      if (next_sample[e] > now) continue;
      float* cur = y + 2 * static_cast<std::size_t>(head[e]);
      float* other = y + 2 * static_cast<std::size_t>(tail[e]);
      double dx = cur[0] - other[0], dy = cur[1] - other[1];
      double d2 = dx * dx + dy * dy;
      if (d2 > 0) {
        const double coeff = -2.0 * a * b * std::pow(d2, b - 1.0) / (a * std::pow(d2, b) + 1.0);
        const double gx = clip(coeff * dx), gy = clip(coeff * dy);
        cur[0] += static_cast<float>(gx * alpha);
        cur[1] += static_cast<float>(gy * alpha);
        other[0] -= static_cast<float>(gx * alpha);
        other[1] -= static_cast<float>(gy * alpha);
      }
      next_sample[e] += per_sample[e];

      const auto negatives = static_cast<std::size_t>((now - next_negative[e]) / per_negative[e]);
      for (std::size_t p = 0; p < negatives; ++p) {
        const auto k = rng.below(n);
        if (k == static_cast<std::size_t>(head[e])) continue;
        const float* neg = y + 2 * k;
        dx = cur[0] - neg[0];
        dy = cur[1] - neg[1];
        d2 = dx * dx + dy * dy;
        double gx = 4.0, gy = 4.0;
        if (d2 > 0) {
          const double coeff = 2.0 * b / ((0.001 + d2) * (a * std::pow(d2, b) + 1.0));
          gx = clip(coeff * dx);
          gy = clip(coeff * dy);
        }
        cur[0] += static_cast<float>(gx * alpha);
        cur[1] += static_cast<float>(gy * alpha);
      }
      next_negative[e] += static_cast<double>(negatives) * per_negative[e];
    }
  }
  if (!out.coords.all_finite()) throw NumericError("layout_2d: non-finite coordinates");
  return out;
}

Embedding2D embed(const Tensor<float>& points, const EmbeddingConfig& config) {
  if (points.rank() != 2) throw DimensionError("embed: expected [count, dim], got " + shape_str(points.shape()));
  config.validate(points.dim(0));
  if (points.dim(0) == 1) {
    Affinities single;
    single.count = 1;
    return layout_2d(single, config);
  }
  return layout_2d(fuzzy_affinities(knn_graph(points, config.n_neighbors, config.metric)), config);
}

double neighbor_purity(const Tensor<float>& coords, std::span<const std::int32_t> labels, std::size_t k) {
  if (coords.dim(0) != labels.size()) throw DimensionError("neighbor_purity: label count mismatch");
  const auto g = knn_graph(coords, k, Metric::kEuclidean);
  std::size_t same = 0;
  for (std::size_t i = 0; i < g.count; ++i) {
    for (auto j : g.neighbors(i)) same += labels[static_cast<std::size_t>(j)] == labels[i];
  }
  return static_cast<double>(same) / static_cast<double>(g.count * k);
}

void save_embedding_csv(const fs::path& path, const Embedding2D& e, std::span<const std::int32_t> labels) {
  const std::size_t n = e.coords.dim(0);
  if (!labels.empty() && labels.size() != n) throw DimensionError("save_embedding_csv: label count mismatch");
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string(), 0);
  os.precision(9);
  os << "index,x,y,label\n";
  for (std::size_t i = 0; i < n; ++i) {
    os << i << ',' << e.coords.at(i, 0) << ',' << e.coords.at(i, 1) << ',';
    if (!labels.empty()) os << labels[i];
    os << '\n';
  }
}

}  // namespace atlasbench::embedding
