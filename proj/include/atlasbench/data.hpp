#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "atlasbench/tensor.hpp"
#include "json.hpp"

namespace atlasbench::data {

enum class LabelScheme { kDigit, kShift, kCifar10Class, kCoarse, kFine };
enum class Split { kTrain, kTest };
enum class CifarVariant { kCifar10, kCifar100 };

std::string scheme_name(LabelScheme scheme);
LabelScheme parse_scheme(std::string_view name);
std::string split_name(Split split);

struct LabelSet {
  LabelScheme scheme = LabelScheme::kDigit;
  std::size_t classes = 0;
  std::vector<std::int32_t> values;
};

/// Images in [0,1] as [count, channels, height, width], with one or more
/// aligned label vectors.
struct LabeledDataset {
  std::string name;
  Split split = Split::kTrain;
  Tensor<float> images;
  std::vector<LabelSet> label_sets;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }

  bool has_labels(LabelScheme scheme) const;
  /// Throws ContractError naming the available schemes.
  const LabelSet& labels(LabelScheme scheme) const;
  /// Rows in the given order; labels follow.
  LabeledDataset subset(std::span<const std::size_t> rows) const;
  /// Throws FormatError/ContractError when an invariant is violated.
  void validate() const;
  /// FNV-1a of the image bytes (split-mixing checks).
  std::uint64_t content_hash() const;
};

struct DatasetPair {
  LabeledDataset train;
  LabeledDataset test;
};

inline constexpr std::size_t kMnistTrainSize = 50000;
inline constexpr std::size_t kMnistSide = 28;
/// 28 * floor(50000 / 28).
inline constexpr std::size_t kTranslatedBaseCount = kMnistTrainSize / kMnistSide;
inline constexpr std::size_t kTranslatedTrainSize = kTranslatedBaseCount * kMnistSide;

/// Reads the four IDX files (optionally gzip-compressed) from `dir`. Train is
/// the first 50,000 of the 60,000 standard training images.
DatasetPair load_mnist(const std::filesystem::path& dir);

/// Parses one IDX image or label file (used by load_mnist; exposed for tests).
Tensor<float> read_idx_images(const std::filesystem::path& path);
std::vector<std::int32_t> read_idx_labels(const std::filesystem::path& path);

/// Cyclic horizontal shift to the right by `shift` columns, per channel.
Tensor<float> cyclic_shift_columns(const Tensor<float>& image_chw, std::size_t shift);

/// floor(50000/28) random base images, each emitted in all 28 cyclic shifts
/// (base-major order), carrying digit and shift labels.
LabeledDataset make_translated_mnist(const LabeledDataset& train, std::uint64_t seed);

/// Evaluation split for the shift task: floor(count/28) random test images in
/// all 28 shifts. The untouched test split is the digit-task test set.
LabeledDataset make_translated_test(const LabeledDataset& test, std::uint64_t seed);

DatasetPair load_cifar(const std::filesystem::path& dir, CifarVariant variant);

/// CIFAR binary record parsing (exposed for round-trip tests).
LabeledDataset read_cifar_file(const std::filesystem::path& path, CifarVariant variant, Split split);
void write_cifar_file(const std::filesystem::path& path, const LabeledDataset& ds, CifarVariant variant);

/// Coarse classes 0, 1, 2 (aquatic mammals, fish, flowers) with coarse labels
/// kept and the 15 fine labels remapped to 0..14 (coarse c owns 5c..5c+4).
DatasetPair cifar100_coarse_subset(const DatasetPair& cifar100);

struct AugmentationPolicy {
  double max_shift_fraction = 0.0;
  double max_rotation = 0.0;  // radians
  bool horizontal_flip = false;
  std::vector<float> fill{0.0f};  // one value or one per channel

  /// Random shifts up to 10%, rotations up to pi/6, flips.
  static AugmentationPolicy cifar10(std::vector<float> channel_means);
  static AugmentationPolicy none() { return {}; }
  void validate() const;
  bool is_identity() const { return max_shift_fraction == 0 && max_rotation == 0 && !horizontal_flip; }
};

/// Per-image random shift, rotation and flip with bilinear resampling.
Tensor<float> augment_batch(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng);

/// Mean of each channel over the whole dataset.
std::vector<float> channel_means(const LabeledDataset& ds);

void save_dataset(const std::filesystem::path& path, const LabeledDataset& ds);
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace atlasbench::data
