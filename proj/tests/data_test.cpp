#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "atlasbench/data.hpp"
#include "atlasbench/ops.hpp"
#include "support/fixtures.hpp"

namespace atlasbench::data {
namespace {

using testing::TempDir;

void write_mnist_dir(const TempDir& dir, std::uint32_t train_n, std::uint32_t test_n, bool gzip) {
  const std::string ext = gzip ? ".gz" : "";
  testing::write_bytes(dir / ("train-images-idx3-ubyte" + ext), testing::idx_images(train_n, 28, 28, 1), gzip);
  testing::write_bytes(dir / ("train-labels-idx1-ubyte" + ext), testing::idx_labels(train_n, 2), gzip);
  testing::write_bytes(dir / ("t10k-images-idx3-ubyte" + ext), testing::idx_images(test_n, 28, 28, 3), gzip);
  testing::write_bytes(dir / ("t10k-labels-idx1-ubyte" + ext), testing::idx_labels(test_n, 4), gzip);
}

LabeledDataset synthetic_mnist(std::size_t n, Split split, std::uint64_t seed) {
  LabeledDataset ds;
  ds.name = "mnist";
  ds.split = split;
  ds.images = Tensor<float>({n, 1, 28, 28});
  Rng rng(seed);
  for (auto& v : ds.images.storage()) v = static_cast<float>(rng.below(256)) / 255.0f;
  LabelSet l{LabelScheme::kDigit, 10, {}};
  for (std::size_t i = 0; i < n; ++i) l.values.push_back(static_cast<std::int32_t>(rng.below(10)));
  ds.label_sets.push_back(l);
  return ds;
}

TEST(Mnist, LoadsRawAndGzipIdentically) {
  TempDir raw("mnist-raw"), gz("mnist-gz");
  write_mnist_dir(raw, 120, 30, false);
  write_mnist_dir(gz, 120, 30, true);
  const auto a = load_mnist(raw.path());
  const auto b = load_mnist(gz.path());
  EXPECT_EQ(a.train.size(), 120u);
  EXPECT_EQ(a.test.size(), 30u);
  EXPECT_EQ(a.train.images.shape(), (Shape{120, 1, 28, 28}));
  EXPECT_EQ(a.train.images, b.train.images);
  EXPECT_EQ(a.test.labels(LabelScheme::kDigit).values, b.test.labels(LabelScheme::kDigit).values);
  a.train.validate();
  a.test.validate();
}

TEST(Mnist, PixelsScaledByByteValue) {
  TempDir dir("mnist-px");
  const auto bytes = testing::idx_images(3, 28, 28, 9);
  testing::write_bytes(dir / "img", bytes);
  const auto t = read_idx_images(dir / "img");
  for (std::size_t i = 0; i < t.numel(); ++i) ASSERT_FLOAT_EQ(t[i], bytes[16 + i] / 255.0f);
}

TEST(Mnist, BadMagicIsFormatErrorAtOffsetZero) {
  TempDir dir("mnist-magic");
  auto bytes = testing::idx_images(2, 28, 28, 1);
  bytes[3] = 0x01;
  testing::write_bytes(dir / "img", bytes);
  try {
    read_idx_images(dir / "img");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  write_mnist_dir(dir, 10, 10, false);
  testing::write_bytes(dir / "t10k-labels-idx1-ubyte", {0, 0, 8, 3, 0, 0, 0, 10});
  EXPECT_THROW(load_mnist(dir.path()), FormatError);
}

TEST(Mnist, TruncationReportsFileLength) {
  TempDir dir("mnist-trunc");
  auto bytes = testing::idx_images(2, 28, 28, 1);
  bytes.resize(bytes.size() - 5);
  testing::write_bytes(dir / "img", bytes);
  try {
    read_idx_images(dir / "img");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), bytes.size());
  }
}

TEST(Mnist, RealFilesGiveStandardSplitSizes) {
  if (!testing::have_mnist()) GTEST_SKIP() << "ATLASBENCH_DATA/mnist not present";
  const auto d = load_mnist(testing::data_root() / "mnist");
  EXPECT_EQ(d.train.size(), 50000u);
  EXPECT_EQ(d.test.size(), 10000u);
  EXPECT_EQ(d.train.images.shape(), (Shape{50000, 1, 28, 28}));
  d.train.validate();
  d.test.validate();
  const auto t = make_translated_mnist(d.train, 0);
  EXPECT_EQ(t.size(), 49980u);
  t.validate();
  EXPECT_NE(d.train.content_hash(), d.test.content_hash());
}

TEST(Translated, ShiftByZeroAndBySideAreIdentity) {
  const auto ds = synthetic_mnist(1, Split::kTrain, 5);
  const Tensor<float> img({1, 28, 28}, ds.images.storage());
  EXPECT_EQ(cyclic_shift_columns(img, 0), img);
  EXPECT_EQ(cyclic_shift_columns(img, 28), img);
  EXPECT_EQ(cyclic_shift_columns(cyclic_shift_columns(img, 11), 17), img);
}

TEST(Translated, ColumnSumsArePermutedCyclically) {
  const auto src = synthetic_mnist(28 * 2 + 5, Split::kTrain, 8);
  const auto t = make_translated_mnist(src, 3);
  ASSERT_EQ(t.size(), 56u);
  auto column_sums = [&](std::size_t n) {
    std::vector<double> s(28, 0.0);
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t c = 0; c < 28; ++c) s[c] += t.images.at(n, 0, r, c);
    return s;
  };
  for (std::size_t b = 0; b < 2; ++b) {
    const auto base = column_sums(b * 28);
    for (std::size_t s = 0; s < 28; ++s) {
      const auto cur = column_sums(b * 28 + s);
      for (std::size_t c = 0; c < 28; ++c) ASSERT_DOUBLE_EQ(cur[(c + s) % 28], base[c]);
    }
  }
}

TEST(Translated, LabelsAndBaseSelection) {
  const auto src = synthetic_mnist(28 * 6 + 13, Split::kTrain, 9);
  const auto t = make_translated_mnist(src, 42);
  ASSERT_EQ(t.size(), 6u * 28);
  t.validate();
  const auto& digit = t.labels(LabelScheme::kDigit).values;
  const auto& shift = t.labels(LabelScheme::kShift).values;
  EXPECT_EQ(t.labels(LabelScheme::kShift).classes, 28u);
  std::set<std::uint64_t> base_hashes;
  for (std::size_t b = 0; b < 6; ++b) {
    std::set<std::int32_t> seen;
    for (std::size_t s = 0; s < 28; ++s) {
      EXPECT_EQ(digit[b * 28 + s], digit[b * 28]);
      seen.insert(shift[b * 28 + s]);
    }
    EXPECT_EQ(seen.size(), 28u);
    // The unshifted variant is an image of the source.
    const auto row = t.images.slice_rows(b * 28, b * 28 + 1);
    bool found = false;
    for (std::size_t i = 0; i < src.size() && !found; ++i) {
      if (src.images.slice_rows(i, i + 1) == row) found = digit[b * 28] == src.labels(LabelScheme::kDigit).values[i];
    }
    EXPECT_TRUE(found);
    base_hashes.insert(fnv1a(row.data(), row.numel() * sizeof(float)));
  }
  EXPECT_EQ(base_hashes.size(), 6u);

  EXPECT_EQ(make_translated_mnist(src, 42).images, t.images);
  EXPECT_NE(make_translated_mnist(src, 43).images, t.images);
  EXPECT_EQ(t.provenance.at("seed").get<std::uint64_t>(), 42u);
}

TEST(Translated, SourceMustBeTrainSplit) {
  EXPECT_THROW(make_translated_mnist(synthetic_mnist(56, Split::kTest, 1), 0), ContractError);
  const auto test = make_translated_test(synthetic_mnist(60, Split::kTest, 1), 0);
  EXPECT_EQ(test.size(), 56u);
  EXPECT_EQ(test.split, Split::kTest);
}

LabeledDataset synthetic_cifar100(std::size_t per_fine, Split split, std::uint64_t seed,
                                  std::vector<std::int32_t>& coarse_of_fine) {
  Rng rng(seed);
  if (coarse_of_fine.empty()) {
    std::vector<std::int32_t> fines(100);
    std::iota(fines.begin(), fines.end(), 0);
    Rng perm(99);
    perm.shuffle(fines.begin(), fines.end());
    coarse_of_fine.assign(100, 0);
    for (std::size_t i = 0; i < 100; ++i) coarse_of_fine[fines[i]] = static_cast<std::int32_t>(i / 5);
  }
  const std::size_t n = 100 * per_fine;
  LabeledDataset ds;
  ds.name = "cifar100";
  ds.split = split;
  ds.images = Tensor<float>({n, 3, 32, 32});
  for (auto& v : ds.images.storage()) v = static_cast<float>(rng.below(256)) / 255.0f;
  LabelSet coarse{LabelScheme::kCoarse, 20, {}}, fine{LabelScheme::kFine, 100, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = static_cast<std::int32_t>(i % 100);
    fine.values.push_back(f);
    coarse.values.push_back(coarse_of_fine[f]);
  }
  ds.label_sets = {coarse, fine};
  return ds;
}

TEST(Cifar, RoundTripBothVariants) {
  TempDir dir("cifar");
  std::vector<std::int32_t> map;
  const auto c100 = synthetic_cifar100(1, Split::kTrain, 3, map);
  write_cifar_file(dir / "c100.bin", c100, CifarVariant::kCifar100);
  EXPECT_EQ(std::filesystem::file_size(dir / "c100.bin"), 100u * 3074);
  const auto back = read_cifar_file(dir / "c100.bin", CifarVariant::kCifar100, Split::kTrain);
  EXPECT_EQ(back.images, c100.images);
  EXPECT_EQ(back.labels(LabelScheme::kCoarse).values, c100.labels(LabelScheme::kCoarse).values);
  EXPECT_EQ(back.labels(LabelScheme::kFine).values, c100.labels(LabelScheme::kFine).values);

  LabeledDataset c10 = c100;
  c10.label_sets = {{LabelScheme::kCifar10Class, 10, std::vector<std::int32_t>(100)}};
  for (std::size_t i = 0; i < 100; ++i) c10.label_sets[0].values[i] = static_cast<std::int32_t>(i % 10);
  write_cifar_file(dir / "c10.bin", c10, CifarVariant::kCifar10);
  EXPECT_EQ(std::filesystem::file_size(dir / "c10.bin"), 100u * 3073);
  const auto back10 = read_cifar_file(dir / "c10.bin", CifarVariant::kCifar10, Split::kTest);
  EXPECT_EQ(back10.images, c10.images);
  EXPECT_EQ(back10.label_sets[0].values, c10.label_sets[0].values);
}

TEST(Cifar, LoaderConcatenatesBatches) {
  TempDir dir("cifar10");
  std::vector<std::int32_t> map;
  auto src = synthetic_cifar100(1, Split::kTrain, 4, map);
  src.label_sets = {{LabelScheme::kCifar10Class, 10, std::vector<std::int32_t>(100, 3)}};
  std::filesystem::create_directories(dir / "cifar-10-batches-bin");
  for (int i = 1; i <= 5; ++i) {
    write_cifar_file(dir / "cifar-10-batches-bin" / ("data_batch_" + std::to_string(i) + ".bin"), src,
                     CifarVariant::kCifar10);
  }
  write_cifar_file(dir / "cifar-10-batches-bin" / "test_batch.bin", src, CifarVariant::kCifar10);
  const auto d = load_cifar(dir.path(), CifarVariant::kCifar10);
  EXPECT_EQ(d.train.size(), 500u);
  EXPECT_EQ(d.test.size(), 100u);
  EXPECT_EQ(d.train.images.slice_rows(400, 500), src.images);
}

TEST(Cifar, RecordSizeMismatchAndLabelRange) {
  TempDir dir("cifar-bad");
  testing::write_bytes(dir / "short.bin", std::vector<unsigned char>(3073 * 2 + 7, 0));
  try {
    read_cifar_file(dir / "short.bin", CifarVariant::kCifar10, Split::kTrain);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 3073u * 2);
  }
  std::vector<unsigned char> rec(3074, 0);
  rec[0] = 20;
  testing::write_bytes(dir / "coarse.bin", rec);
  EXPECT_THROW(read_cifar_file(dir / "coarse.bin", CifarVariant::kCifar100, Split::kTrain), FormatError);
  rec[0] = 19;
  rec[1] = 100;
  testing::write_bytes(dir / "fine.bin", rec);
  EXPECT_THROW(read_cifar_file(dir / "fine.bin", CifarVariant::kCifar100, Split::kTrain), FormatError);
}

TEST(Cifar, CoarseSubsetPartitionAndBalance) {
  std::vector<std::int32_t> map;
  DatasetPair full{synthetic_cifar100(5, Split::kTrain, 1, map), synthetic_cifar100(1, Split::kTest, 2, map)};
  const auto sub = cifar100_coarse_subset(full);
  // 5 fine classes per coarse class, 5 (train) and 1 (test) images each.
  EXPECT_EQ(sub.train.size(), 75u);
  EXPECT_EQ(sub.test.size(), 15u);
  for (const auto* ds : {&sub.train, &sub.test}) {
    ds->validate();
    EXPECT_EQ(ds->labels(LabelScheme::kFine).classes, 15u);
    EXPECT_EQ(ds->labels(LabelScheme::kCoarse).classes, 3u);
    std::map<std::int32_t, std::set<std::int32_t>> coarse_of;
    std::map<std::int32_t, std::size_t> per_coarse;
    const auto& c = ds->labels(LabelScheme::kCoarse).values;
    const auto& f = ds->labels(LabelScheme::kFine).values;
    for (std::size_t i = 0; i < ds->size(); ++i) {
      coarse_of[f[i]].insert(c[i]);
      ++per_coarse[c[i]];
      EXPECT_EQ(f[i] / 5, c[i]);
    }
    EXPECT_EQ(coarse_of.size(), 15u);
    for (const auto& [fine, cs] : coarse_of) EXPECT_EQ(cs.size(), 1u) << fine;
    for (const auto& [coarse, count] : per_coarse) EXPECT_EQ(count, ds->size() / 3) << coarse;
  }
}

Tensor<float> smooth_images(std::size_t n, std::size_t C, std::size_t side, std::uint64_t seed) {
  Tensor<float> t({n, C, side, side});
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < C; ++c) {
      const double fx = rng.uniform(0.05, 0.3), fy = rng.uniform(0.05, 0.3), ph = rng.uniform(0, 6.28);
      const double base = rng.uniform(0.3, 0.7);
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x)
          t.at(i, c, y, x) = static_cast<float>(base + 0.25 * std::sin(fx * x + fy * y + ph));
    }
  }
  return t;
}

TEST(Augment, ZeroPolicyIsIdentity) {
  const auto batch = smooth_images(8, 3, 32, 1);
  Rng rng(1);
  EXPECT_EQ(augment_batch(batch, AugmentationPolicy::none(), rng), batch);
  AugmentationPolicy p;
  p.fill = {0.5f, 0.5f, 0.5f};
  EXPECT_EQ(augment_batch(batch, p, rng), batch);
}

TEST(Augment, FlipIsAnInvolution) {
  const auto batch = smooth_images(1, 3, 32, 2);
  Tensor<float> once(batch.shape()), twice(batch.shape());
  const std::vector<float> fill(3, 0.0f);
  resample_affine<float>(batch.data(), once.data(), 3, 32, 32, Affine2d::flip_horizontal(), fill);
  resample_affine<float>(once.data(), twice.data(), 3, 32, 32, Affine2d::flip_horizontal(), fill);
  EXPECT_EQ(twice, batch);
  for (std::size_t x = 0; x < 32; ++x) EXPECT_EQ(once.at(0, 1, 5, x), batch.at(0, 1, 5, 31 - x));

  // Flip-only policy: every output is the input or its mirror, and both occur.
  AugmentationPolicy p;
  p.horizontal_flip = true;
  const auto many = smooth_images(64, 1, 16, 3);
  Rng rng(5);
  const auto out = augment_batch(many, p, rng);
  std::size_t flipped = 0;
  for (std::size_t i = 0; i < 64; ++i) {
    const auto a = out.slice_rows(i, i + 1), b = many.slice_rows(i, i + 1);
    if (a == b) continue;
    ++flipped;
    for (std::size_t x = 0; x < 16; ++x) ASSERT_EQ(a.at(0, 0, 7, x), b.at(0, 0, 7, 15 - x));
  }
  EXPECT_GT(flipped, 10u);
  EXPECT_LT(flipped, 54u);
}

TEST(Augment, MeanPixelShiftIsSmall) {
  const auto batch = smooth_images(1000, 3, 32, 4);
  LabeledDataset ds;
  ds.images = batch;
  const auto means = channel_means(ds);
  Rng rng(11);
  const auto out = augment_batch(batch, AugmentationPolicy::cifar10(means), rng);
  const std::size_t per = 3 * 32 * 32;
  double worst = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    double a = 0, b = 0;
    for (std::size_t k = 0; k < per; ++k) {
      a += batch[i * per + k];
      b += out[i * per + k];
    }
    worst = std::max(worst, std::abs(a - b) / per);
  }
  EXPECT_LT(worst, 0.15);
  EXPECT_NE(out, batch);
}

TEST(Augment, PolicyValidation) {
  AugmentationPolicy p;
  p.max_shift_fraction = 1.5;
  EXPECT_THROW(p.validate(), ContractError);
  p.max_shift_fraction = 0.1;
  p.max_rotation = 4.0;
  EXPECT_THROW(p.validate(), ContractError);
  p.max_rotation = 0.1;
  p.fill = {0.1f, 0.2f};
  Rng rng(0);
  EXPECT_THROW(augment_batch(smooth_images(1, 3, 8, 0), p, rng), ContractError);
}

TEST(Container, RoundTripAndCorruption) {
  TempDir dir("container");
  const auto t = make_translated_mnist(synthetic_mnist(60, Split::kTrain, 3), 7);
  save_dataset(dir / "t.ds", t);
  const auto back = load_dataset(dir / "t.ds");
  EXPECT_EQ(back.images, t.images);
  EXPECT_EQ(back.name, t.name);
  EXPECT_EQ(back.provenance, t.provenance);
  ASSERT_EQ(back.label_sets.size(), 2u);
  EXPECT_EQ(back.labels(LabelScheme::kShift).values, t.labels(LabelScheme::kShift).values);

  std::filesystem::resize_file(dir / "t.ds", std::filesystem::file_size(dir / "t.ds") - 4);
  EXPECT_THROW(load_dataset(dir / "t.ds"), FormatError);
  testing::write_bytes(dir / "junk.ds", std::vector<unsigned char>(64, 7));
  EXPECT_THROW(load_dataset(dir / "junk.ds"), FormatError);
}

TEST(Dataset, ValidateRejectsBadLabels) {
  auto ds = synthetic_mnist(4, Split::kTrain, 1);
  ds.label_sets[0].values[2] = 10;
  EXPECT_THROW(ds.validate(), ContractError);
  ds.label_sets[0].values.pop_back();
  EXPECT_THROW(ds.validate(), ContractError);
  EXPECT_THROW(ds.labels(LabelScheme::kFine), ContractError);
}

}  // namespace
}  // namespace atlasbench::data
