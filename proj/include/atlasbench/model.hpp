#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "atlasbench/autograd.hpp"
#include "json.hpp"

namespace atlasbench::model {

enum class ModelKind { kMlp, kCnn };

/// Filters per conv block; both layers of a block share the count.
struct ConvPlan {
  std::size_t block1 = 32;
  std::size_t block2 = 32;
  friend bool operator==(const ConvPlan&, const ConvPlan&) = default;
};

/// Declarative architecture.
///  mlp: input -> hidden_widths[0] -> ... -> hidden_widths[L-1] -> classes
///  cnn: conv1a, conv1b, pool1, conv2a, conv2b, pool2 (filter 3, same padding,
///       pool 2), then fc-penultimate (width `penultimate`) and logits.
struct ModelSpec {
  ModelKind kind = ModelKind::kMlp;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  std::vector<std::size_t> hidden_widths;
  ConvPlan conv;
  std::size_t penultimate = 0;
  std::size_t classes = 10;

  static ModelSpec mlp(std::size_t channels, std::size_t height, std::size_t width,
                       std::vector<std::size_t> hidden, std::size_t classes);
  static ModelSpec cnn(std::size_t channels, std::size_t height, std::size_t width, ConvPlan conv,
                       std::size_t penultimate, std::size_t classes);

  std::size_t input_dim() const { return channels * height * width; }
  /// Hidden-layer count L (cnn: the 4 conv + 1 hidden fc layers).
  std::size_t depth() const;
  /// Width n of the layer feeding the classifier.
  std::size_t penultimate_width() const;
  /// Throws ContractError on an invalid spec.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelSpec from_json(const nlohmann::json& j);
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct Layer {
  std::string name;
  Var<float> weight;  // fc: [in, out]; conv: [out, in, 3, 3]
  Var<float> bias;    // [out]
};

struct ModelParams {
  ModelSpec spec;
  std::vector<Layer> layers;
  std::uint64_t seed = 0;

  /// Weights and biases in declaration order.
  std::vector<Var<float>> parameters() const;
  /// Registered activation taps, in forward order. Always starts with "input"
  /// (the flattened image; used for raw-input atlases).
  std::vector<std::string> taps() const;
  bool has_tap(std::string_view name) const;
  /// Width of the vector a tap produces (channels for conv taps).
  std::size_t tap_width(std::string_view name) const;
  bool is_spatial_tap(std::string_view name) const;
};

ModelParams build_model(const ModelSpec& spec, std::uint64_t seed);

/// Deep copy whose parameters are constants (no gradients flow into them).
ModelParams frozen_copy(const ModelParams& params);

/// Runs the network. When `stop_at` names a tap, stops after producing it.
/// Taps hold post-activation values; "logits" is the final affine output.
struct ForwardResult {
  std::map<std::string, Var<float>, std::less<>> taps;
  Var<float> output;  // the last computed tap
};
ForwardResult forward(const ModelParams& params, const Var<float>& input, std::string_view stop_at = {});

/// Convenience: the value of one tap. Throws ContractError listing taps when unknown.
Var<float> forward_to(const ModelParams& params, const Var<float>& input, std::string_view tap);

std::size_t param_count(const ModelSpec& spec);

struct WidthPlan {
  std::size_t depth = 1;
  std::size_t input_dim = 784;
  std::size_t output_dim = 28;
  std::size_t max_width = 2000;
  std::size_t width = 2000;
};

/// Width for an L-hidden-layer mlp with roughly the parameter count of the
/// single-layer network of width `max_width`.
WidthPlan plan_width(std::size_t depth, std::size_t input_dim, std::size_t output_dim, std::size_t max_width);

/// Conv filters scale linearly with the penultimate width: n/4 per block.
ConvPlan scale_cnn_filters(std::size_t penultimate);

/// FNV-1a over every parameter's bytes.
std::uint64_t params_checksum(const ModelParams& params);

struct Checkpoint {
  ModelParams params;
  std::string config_hash;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, std::string_view config_hash);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace atlasbench::model
