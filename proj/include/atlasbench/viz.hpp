#pragma once

#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atlasbench/atlas.hpp"
#include "atlasbench/model.hpp"
#include "atlasbench/ops.hpp"
#include "json.hpp"

namespace atlasbench::viz {

/// cosine-power: (h.y) max(0.1, cos)^4, maximized.
/// angle-power (alias paper-literal): (h.y) max(0.1, angle)^4 with the angle in radians, minimized.
enum class ObjectiveMode { kCosinePower, kAnglePower };
enum class Parameterization { kPixel, kFourier };
enum class TargetKind { kAtlasCell, kNeuron };

std::string mode_name(ObjectiveMode m);
ObjectiveMode parse_mode(std::string_view s);
std::string parameterization_name(Parameterization p);
Parameterization parse_parameterization(std::string_view s);

struct VizTarget {
  std::vector<double> direction;
  std::string layer;
  TargetKind kind = TargetKind::kAtlasCell;
  std::size_t index = 0;  // cell index or neuron index

  /// Throws ContractError unless the direction is finite and nonzero.
  void validate() const;
};

struct VizConfig {
  std::size_t steps = 512;
  double learning_rate = 0.05;
  int jitter_px = 2;
  double scale_min = 0.95;
  double scale_max = 1.05;
  double rotation = 5.0 * std::numbers::pi / 180.0;  // +/- radians
  double pad_fill = 0.0;
  double init_low = 0.45;
  double init_high = 0.55;
  ObjectiveMode mode = ObjectiveMode::kCosinePower;
  Parameterization parameterization = Parameterization::kPixel;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static VizConfig from_json(const nlohmann::json& j);
  std::string hash() const;
  /// No jitter, scaling or rotation.
  bool transforms_disabled() const;
};

double objective(std::span<const double> h, std::span<const double> y, ObjectiveMode mode);

struct ObjectiveGradient {
  double value = 0;
  std::vector<double> gradient;  // d value / d h
};
ObjectiveGradient objective_with_gradient(std::span<const double> h, std::span<const double> y, ObjectiveMode mode);

/// Output-to-input sampling map for jitter, rescale, rotate, jitter(+/-1),
/// applied to the image in that order.
Affine2d sample_transform(const VizConfig& config, Rng& rng);

struct VizResult {
  Tensor<float> image;  // [C, H, W] in [0, 1]
  std::vector<double> trace;
  std::string layer;
  TargetKind kind = TargetKind::kAtlasCell;
  std::size_t index = 0;
  std::string config_hash;
  nlohmann::json config;
  /// Cosine between the untransformed activation and the target.
  double initial_alignment = 0;
  double final_alignment = 0;
};

/// Seed for a target, derived from the config seed, the kind and the index.
std::uint64_t target_seed(const VizConfig& config, const VizTarget& target);

VizResult optimize_input(const model::ModelParams& params, const VizTarget& target, const VizConfig& config);

struct RenderOutcome {
  std::size_t index = 0;
  std::optional<VizResult> result;
  std::string error;
};

/// optimize_input over each target in order; failures are kept per target.
std::vector<RenderOutcome> render_targets(const model::ModelParams& params, std::span<const VizTarget> targets,
                                          const VizConfig& config);

/// One target per occupied cell, in cell order.
std::vector<VizTarget> atlas_targets(const atlas::AtlasGrid& grid);
std::vector<VizTarget> neuron_targets(const std::vector<atlas::NeuronDirection>& neurons, const std::string& layer);

}  // namespace atlasbench::viz
