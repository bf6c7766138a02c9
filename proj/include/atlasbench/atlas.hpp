#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "atlasbench/data.hpp"
#include "atlasbench/embedding.hpp"
#include "atlasbench/model.hpp"

namespace atlasbench::atlas {

enum class SpatialMode { kRandom, kCenter };

/// One activation vector per input, f^l(x_i).
struct ActivationSet {
  Tensor<float> vectors;  // [count, n]
  std::string layer;
  std::string checkpoint_hash;
  std::vector<std::int64_t> source_index;
  std::vector<std::array<std::int32_t, 2>> locations;  // (row, col); conv taps only
  std::vector<std::int32_t> labels;

  std::size_t count() const { return vectors.dim(0); }
  std::size_t width() const { return vectors.dim(1); }
};

/// Runs the frozen model over `images` ([count, C, H, W]) in batches and
/// keeps `layer`. Conv taps keep one spatial position per input.
ActivationSet collect_activations(const model::ModelParams& params, std::string_view layer, const Tensor<float>& images,
                                  std::span<const std::int32_t> labels, SpatialMode spatial = SpatialMode::kRandom,
                                  std::uint64_t seed = 0, std::size_t batch_size = 256);

/// Identity extractor: the flattened images themselves.
ActivationSet collect_raw(const Tensor<float>& images, std::span<const std::int32_t> labels);

/// Axis-aligned g x g partition of the bounding box of `coords`.
struct GridAssignment {
  std::size_t g = 1;
  std::array<float, 4> bounds{0, 0, 0, 0};  // min x, max x, min y, max y
  std::vector<std::int32_t> cells;         // row * g + col, row from y
};

/// Boundary points go to the lower cell; the maximum lands in the last cell.
GridAssignment bin_to_grid(const Tensor<float>& coords, std::size_t g);

/// w = W (v - mean), W = (C + ridge I)^(-1/2) of the full collection.
struct Whitening {
  std::vector<double> mean;
  Tensor<double> matrix;   // [n, n]
  Tensor<double> inverse;  // [n, n], W^(-1)
  double ridge = 0;
  double min_eigenvalue = 0;

  std::vector<double> apply(std::span<const double> v) const;
  std::vector<double> invert(std::span<const double> w) const;
};

inline constexpr double kRidgeScale = 1e-5;

/// Sample covariance (n-1 denominator), ridge = scale * trace / n.
Whitening fit_whitening(const Tensor<float>& vectors, double ridge_scale = kRidgeScale);

struct AtlasGrid {
  std::size_t g = 15;
  std::string layer;
  std::string checkpoint_hash;
  std::size_t min_occupancy = 5;
  GridAssignment assignment;
  std::vector<std::uint32_t> counts;  // g*g
  std::vector<std::uint8_t> mask;     // 1 = occupied (count >= min_occupancy)
  Tensor<double> directions;          // [g*g, n]; zero rows where masked
  Tensor<double> cell_means;          // [g*g, n]; unwhitened
  Whitening whitening;

  std::size_t cells() const { return g * g; }
  std::size_t width() const { return directions.dim(1); }
  std::size_t occupied() const;
};

AtlasGrid average_and_whiten(const ActivationSet& acts, const GridAssignment& assignment,
                             std::size_t min_occupancy = 5, double ridge_scale = kRidgeScale);

struct NeuronDirection {
  std::size_t index = 0;
  std::vector<float> direction;
};

/// `count` distinct one-hot vectors of length n, sampled without replacement.
std::vector<NeuronDirection> neuron_directions(std::size_t n, std::size_t count, std::uint64_t seed);

void save_atlas(const std::filesystem::path& path, const AtlasGrid& grid);
AtlasGrid load_atlas(const std::filesystem::path& path);

/// Circular-circular correlation (Jammalamadaka-SenGupta) of two angle lists.
double circular_correlation(std::span<const double> a, std::span<const double> b);

/// For each class: correlation between the shift angle 2 pi s / period and the
/// angular position of each point about the class centroid in `coords`.
std::vector<double> shift_angle_correlation(const Tensor<float>& coords, std::span<const std::int32_t> classes,
                                            std::span<const std::int32_t> shifts, std::size_t period);

}  // namespace atlasbench::atlas
