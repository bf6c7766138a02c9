#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atlasbench/data.hpp"
#include "atlasbench/model.hpp"
#include "json.hpp"

namespace atlasbench::transfer {

/// A constant rate, or the "1/n" rule resolved against the penultimate width.
struct LearningRate {
  double value = 0.01;
  bool inverse_width = false;

  double resolve(std::size_t width) const;
  std::string str() const;
  static LearningRate parse(std::string_view s);
};

struct EpochStats {
  double train_loss = 0;
  double train_accuracy = 0;
  double test_loss = 0;
  double test_accuracy = 0;
};

struct TrainConfig {
  std::size_t epochs = 10;
  LearningRate learning_rate;
  std::size_t batch_size = 128;
  double momentum = 0.9;
  data::AugmentationPolicy augmentation = data::AugmentationPolicy::none();
  std::uint64_t seed = 0;
  /// Train on the first `train_subset` rows of a seeded shuffle; 0 keeps all.
  std::size_t train_subset = 0;
  /// Called after each epoch with the 1-based epoch; not serialized.
  std::function<void(std::size_t, const EpochStats&)> on_epoch;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  std::string hash() const;
};

struct RunRecord {
  std::string experiment_id;
  std::string phase;  // "original", "finetune" or "baseline"
  nlohmann::json model_spec;
  std::string task;  // label scheme name
  std::vector<EpochStats> epochs;
  double best_test_accuracy = 0;
  std::size_t best_epoch = 0;  // 1-based
  double final_test_accuracy = 0;
  double wall_seconds = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string error;  // set when the run failed
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
  static RunRecord from_json(const nlohmann::json& j);
  /// Writes to a temporary name and renames.
  void save(const std::filesystem::path& path) const;
};

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
  std::size_t correct = 0;
};

/// Exact top-1 accuracy and mean cross-entropy of the full model.
Evaluation evaluate(const model::ModelParams& params, const Tensor<float>& images, std::span<const std::int32_t> labels,
                    std::size_t batch_size = 500);

struct TrainResult {
  model::ModelParams final_params;
  model::ModelParams best_params;
  RunRecord record;
};

/// SGD-momentum on cross-entropy. Writes final.ckpt and best.ckpt when
/// `checkpoint_dir` is non-empty. Throws NumericError on a non-finite loss.
TrainResult train(const model::ModelSpec& spec, const data::LabeledDataset& train_set,
                  const data::LabeledDataset& test_set, data::LabelScheme scheme, const TrainConfig& config,
                  std::string_view experiment_id = "", const std::filesystem::path& checkpoint_dir = {});

/// Linear map on top of frozen features: logits = features W + b.
struct LinearHead {
  Tensor<float> weight;  // [n, classes]
  Tensor<float> bias;    // [classes]
};

/// W ~ N(0, 1/n), b = 0.
LinearHead init_head(std::size_t n, std::size_t classes, std::uint64_t seed);

/// Penultimate-layer features of a frozen model, [count, n].
Tensor<float> penultimate_features(const model::ModelParams& params, const Tensor<float>& images,
                                   std::size_t batch_size = 500);

/// Runs one batch through the frozen network and a head and reports whether
/// gradients reached any network parameter (false) and every head parameter (true).
struct GradientReach {
  std::size_t frozen_reached = 0;
  std::size_t head_reached = 0;
  std::size_t head_parameters = 0;
  bool ok() const { return frozen_reached == 0 && head_reached == head_parameters; }
};
GradientReach check_gradient_reach(const model::ModelParams& frozen, const LinearHead& head,
                                   const Tensor<float>& images, std::span<const std::int32_t> labels);

struct FinetuneResult {
  LinearHead head;
  RunRecord record;
};

/// Fresh linear head on the penultimate features of `frozen`. The network
/// itself never changes; its checksum is compared before and after.
FinetuneResult finetune_head(const model::ModelParams& frozen, const data::LabeledDataset& train_set,
                             const data::LabeledDataset& test_set, data::LabelScheme scheme, const TrainConfig& config,
                             std::string_view experiment_id = "");

/// Linear classifier on flattened raw pixels.
RunRecord linear_baseline(const data::LabeledDataset& train_set, const data::LabeledDataset& test_set,
                          data::LabelScheme scheme, const TrainConfig& config, std::string_view experiment_id = "");

struct ScanSpec {
  std::string experiment_id = "scan";
  data::LabelScheme original = data::LabelScheme::kShift;
  data::LabelScheme target = data::LabelScheme::kDigit;
  std::vector<model::ModelSpec> points;
  std::size_t seeds = 5;
  TrainConfig original_config;
  TrainConfig finetune_config;

  void validate() const;
};

struct AggregateRow {
  std::size_t width = 0;
  std::size_t depth = 0;
  std::size_t params = 0;
  std::string task;  // "original" or "new"
  double mean = 0;
  double std = 0;
  std::size_t n_seeds = 0;
};

struct ScanResult {
  std::vector<RunRecord> records;  // point-major, replicate, then phase
  std::vector<AggregateRow> table;
};

/// Seed for one scan run, from the experiment id, point and replicate.
std::uint64_t scan_seed(std::string_view experiment_id, std::size_t point, std::size_t replicate);

/// Width (penultimate) and hidden-layer depth of a scan point.
std::size_t point_width(const model::ModelSpec& spec);
std::size_t point_depth(const model::ModelSpec& spec);

/// Train on `original`, fine-tune on `target`, for every point and seed.
/// Failed runs are kept with their error and left out of the aggregates.
/// Records go to `results_dir` as JSON when it is non-empty.
ScanResult run_scan(const ScanSpec& scan, const data::LabeledDataset& train_set, const data::LabeledDataset& test_set,
                    const std::filesystem::path& results_dir = {});

/// Mean and sample standard deviation of best test accuracy per point and task.
std::vector<AggregateRow> aggregate(const ScanSpec& scan, std::span<const RunRecord> records);

void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateRow> table);
std::vector<AggregateRow> read_aggregate_csv(const std::filesystem::path& path);

/// 10^x for `points` values of x spaced linearly from -1 down to -3.
std::vector<double> lr_grid(std::size_t points);

struct LrScanResult {
  double best_learning_rate = 0;
  std::vector<double> mean_best_accuracy;  // per grid point
  std::vector<RunRecord> records;
};

/// Runs `experiment` per learning rate and picks the highest mean best accuracy
/// (the first on ties).
LrScanResult lr_scan(std::span<const double> learning_rates,
                     const std::function<std::vector<RunRecord>(double)>& experiment);

}  // namespace atlasbench::transfer
