#include "atlasbench/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "atlasbench/ops.hpp"

namespace atlasbench::data {

namespace fs = std::filesystem;

std::string scheme_name(LabelScheme scheme) {
  switch (scheme) {
    case LabelScheme::kDigit: return "digit";
    case LabelScheme::kShift: return "shift";
    case LabelScheme::kCifar10Class: return "cifar10-class";
    case LabelScheme::kCoarse: return "coarse";
    case LabelScheme::kFine: return "fine";
  }
  return "unknown";
}

LabelScheme parse_scheme(std::string_view name) {
  for (auto s : {LabelScheme::kDigit, LabelScheme::kShift, LabelScheme::kCifar10Class, LabelScheme::kCoarse,
                 LabelScheme::kFine}) {
    if (scheme_name(s) == name) return s;
  }
  throw ContractError("unknown label scheme '" + std::string(name) +
                      "' (expected digit, shift, cifar10-class, coarse or fine)");
}

std::string split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

bool LabeledDataset::has_labels(LabelScheme scheme) const {
  return std::any_of(label_sets.begin(), label_sets.end(), [&](const LabelSet& l) { return l.scheme == scheme; });
}

const LabelSet& LabeledDataset::labels(LabelScheme scheme) const {
  for (const auto& l : label_sets) {
    if (l.scheme == scheme) return l;
  }
  std::string avail;
  for (const auto& l : label_sets) avail += (avail.empty() ? "" : ", ") + scheme_name(l.scheme);
  throw ContractError("dataset '" + name + "' has no '" + scheme_name(scheme) + "' labels (available: " + avail + ")");
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> rows) const {
  LabeledDataset out;
  out.name = name;
  out.split = split;
  out.provenance = provenance;
  out.images = images.gather_rows(rows);
  for (const auto& l : label_sets) {
    LabelSet s{l.scheme, l.classes, {}};
    s.values.reserve(rows.size());
    for (std::size_t r : rows) s.values.push_back(l.values.at(r));
    out.label_sets.push_back(std::move(s));
  }
  return out;
}

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw ContractError("dataset '" + name + "': images must be [count, C, H, W]");
  if (label_sets.empty()) throw ContractError("dataset '" + name + "': no labels");
  for (float v : images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("dataset '" + name + "': pixel outside [0,1]");
  }
  for (const auto& l : label_sets) {
    if (l.values.size() != size()) {
      throw ContractError("dataset '" + name + "': " + scheme_name(l.scheme) + " label count " +
                          std::to_string(l.values.size()) + " != image count " + std::to_string(size()));
    }
    for (auto v : l.values) {
      if (v < 0 || static_cast<std::size_t>(v) >= l.classes) {
        throw ContractError("dataset '" + name + "': " + scheme_name(l.scheme) + " label " + std::to_string(v) +
                            " outside [0, " + std::to_string(l.classes) + ")");
      }
    }
  }
}

std::uint64_t LabeledDataset::content_hash() const {
  return fnv1a(images.data(), images.numel() * sizeof(float));
}

namespace {

std::vector<unsigned char> read_maybe_gz(const fs::path& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw FormatError("cannot open " + path.string(), 0);
  std::vector<unsigned char> out;
  unsigned char buf[1 << 16];
  for (;;) {
    const int n = gzread(f, buf, sizeof buf);
    if (n < 0) {
      int err = 0;
      std::string msg = gzerror(f, &err);
      const auto off = out.size();
      gzclose(f);
      throw FormatError(path.string() + ": " + msg, off);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(f);
  return out;
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const fs::path& path) {
  if (off + 4 > b.size()) throw FormatError(path.string() + ": truncated header", b.size());
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

fs::path find_file(const fs::path& dir, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    for (const auto& candidate : {dir / n, dir / (n + ".gz")}) {
      if (fs::exists(candidate)) return candidate;
    }
  }
  throw FormatError("none of {" + names.front() + "...} found in " + dir.string(), 0);
}

}  // namespace

Tensor<float> read_idx_images(const fs::path& path) {
  const auto b = read_maybe_gz(path);
  const auto magic = be32(b, 0, path);
  if (magic != 0x00000803) throw FormatError(path.string() + ": bad IDX image magic " + hex64(magic), 0);
  const std::size_t n = be32(b, 4, path), rows = be32(b, 8, path), cols = be32(b, 12, path);
  if (n == 0 || rows == 0 || cols == 0) throw FormatError(path.string() + ": zero dimension", 4);
  const std::size_t need = 16 + n * rows * cols;
  if (b.size() < need) throw FormatError(path.string() + ": truncated pixel data", b.size());
  if (b.size() > need) throw FormatError(path.string() + ": trailing bytes", need);
  Tensor<float> out({n, 1, rows, cols});
  for (std::size_t i = 0; i < n * rows * cols; ++i) out[i] = static_cast<float>(b[16 + i]) / 255.0f;
  return out;
}

std::vector<std::int32_t> read_idx_labels(const fs::path& path) {
  const auto b = read_maybe_gz(path);
  const auto magic = be32(b, 0, path);
  if (magic != 0x00000801) throw FormatError(path.string() + ": bad IDX label magic " + hex64(magic), 0);
  const std::size_t n = be32(b, 4, path);
  if (b.size() < 8 + n) throw FormatError(path.string() + ": truncated label data", b.size());
  if (b.size() > 8 + n) throw FormatError(path.string() + ": trailing bytes", 8 + n);
  std::vector<std::int32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (b[8 + i] > 9) throw FormatError(path.string() + ": label out of range", 8 + i);
    out[i] = b[8 + i];
  }
  return out;
}

DatasetPair load_mnist(const fs::path& dir) {
  const auto train_img = find_file(dir, {"train-images-idx3-ubyte", "train-images.idx3-ubyte"});
  const auto train_lbl = find_file(dir, {"train-labels-idx1-ubyte", "train-labels.idx1-ubyte"});
  const auto test_img = find_file(dir, {"t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"});
  const auto test_lbl = find_file(dir, {"t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"});

  auto make = [](const fs::path& ip, const fs::path& lp, Split split, std::size_t keep) {
    auto images = read_idx_images(ip);
    auto labels = read_idx_labels(lp);
    if (labels.size() != images.dim(0)) {
      throw FormatError(lp.string() + ": label count does not match " + ip.string(), 4);
    }
    if (keep < labels.size()) {
      images = images.slice_rows(0, keep);
      labels.resize(keep);
    }
    LabeledDataset ds;
    ds.name = "mnist";
    ds.split = split;
    ds.images = std::move(images);
    ds.label_sets.push_back({LabelScheme::kDigit, 10, std::move(labels)});
    ds.provenance = {{"images", ip.string()}, {"labels", lp.string()}, {"rows", ds.size()}};
    return ds;
  };
  DatasetPair out{make(train_img, train_lbl, Split::kTrain, kMnistTrainSize),
                  make(test_img, test_lbl, Split::kTest, SIZE_MAX)};
  return out;
}

Tensor<float> cyclic_shift_columns(const Tensor<float>& image, std::size_t shift) {
  if (image.rank() != 3) throw DimensionError("cyclic_shift_columns: expected [C,H,W], got " + shape_str(image.shape()));
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Tensor<float> out(image.shape());
  shift %= W;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t r = 0; r < H; ++r) {
      const float* src = image.data() + (c * H + r) * W;
      float* dst = out.data() + (c * H + r) * W;
      for (std::size_t col = 0; col < W; ++col) dst[(col + shift) % W] = src[col];
    }
  }
  return out;
}

namespace {

LabeledDataset translate(const LabeledDataset& src, std::size_t bases, std::uint64_t seed, Split split) {
  if (!src.has_labels(LabelScheme::kDigit)) throw ContractError("translated MNIST needs digit labels");
  if (src.size() < bases) throw ContractError("translated MNIST: source has fewer than " + std::to_string(bases) + " images");
  const std::size_t W = src.width();
  std::vector<std::size_t> order(src.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed({seed, 0x7472616e73}));
  // Partial Fisher-Yates: the first `bases` entries are a uniform sample.
  for (std::size_t i = 0; i < bases; ++i) std::swap(order[i], order[i + rng.below(order.size() - i)]);
  order.resize(bases);

  const auto& digits = src.labels(LabelScheme::kDigit).values;
  const std::size_t C = src.channels(), H = src.height(), plane = C * H * W;
  LabeledDataset out;
  out.name = "translated-mnist";
  out.split = split;
  out.images = Tensor<float>({bases * W, C, H, W});
  LabelSet dl{LabelScheme::kDigit, 10, {}}, sl{LabelScheme::kShift, W, {}};
  for (std::size_t b = 0; b < bases; ++b) {
    Tensor<float> base({C, H, W}, std::vector<float>(src.images.data() + order[b] * plane,
                                                     src.images.data() + (order[b] + 1) * plane));
    for (std::size_t s = 0; s < W; ++s) {
      const auto shifted = cyclic_shift_columns(base, s);
      std::copy_n(shifted.data(), plane, out.images.data() + (b * W + s) * plane);
      dl.values.push_back(digits[order[b]]);
      sl.values.push_back(static_cast<std::int32_t>(s));
    }
  }
  out.label_sets = {std::move(dl), std::move(sl)};
  out.provenance = {{"source", src.provenance},
                    {"seed", seed},
                    {"base_count", bases},
                    {"base_indices_hash", hex64(fnv1a(order.data(), order.size() * sizeof(std::size_t)))}};
  return out;
}

}  // namespace

LabeledDataset make_translated_mnist(const LabeledDataset& train, std::uint64_t seed) {
  if (train.split != Split::kTrain) throw ContractError("make_translated_mnist: source must be a train split");
  return translate(train, train.size() / train.width(), seed, Split::kTrain);
}

LabeledDataset make_translated_test(const LabeledDataset& test, std::uint64_t seed) {
  if (test.split != Split::kTest) throw ContractError("make_translated_test: source must be a test split");
  return translate(test, test.size() / test.width(), derive_seed({seed, 1}), Split::kTest);
}

namespace {

constexpr std::size_t kCifarPixels = 3 * 32 * 32;

std::size_t label_bytes(CifarVariant v) { return v == CifarVariant::kCifar10 ? 1 : 2; }

LabeledDataset concat(std::vector<LabeledDataset> parts) {
  LabeledDataset out = parts.front();
  std::size_t n = 0;
  for (const auto& p : parts) n += p.size();
  out.images = Tensor<float>({n, 3, 32, 32});
  for (auto& l : out.label_sets) l.values.clear();
  nlohmann::json files = nlohmann::json::array();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.images.data(), p.images.numel(), out.images.data() + off);
    off += p.images.numel();
    for (std::size_t k = 0; k < p.label_sets.size(); ++k) {
      out.label_sets[k].values.insert(out.label_sets[k].values.end(), p.label_sets[k].values.begin(),
                                      p.label_sets[k].values.end());
    }
    files.push_back(p.provenance.at("file"));
  }
  out.provenance = {{"files", files}, {"rows", n}};
  return out;
}

}  // namespace

LabeledDataset read_cifar_file(const fs::path& path, CifarVariant variant, Split split) {
  const auto b = read_maybe_gz(path);
  const std::size_t lb = label_bytes(variant), rec = lb + kCifarPixels;
  if (b.empty()) throw FormatError(path.string() + ": empty file", 0);
  if (b.size() % rec != 0) {
    throw FormatError(path.string() + ": size " + std::to_string(b.size()) + " is not a multiple of the " +
                          std::to_string(rec) + "-byte record",
                      b.size() - b.size() % rec);
  }
  const std::size_t n = b.size() / rec;
  LabeledDataset ds;
  ds.name = variant == CifarVariant::kCifar10 ? "cifar10" : "cifar100";
  ds.split = split;
  ds.images = Tensor<float>({n, 3, 32, 32});
  std::vector<std::int32_t> first(n), second;
  if (lb == 2) second.resize(n);
  const std::size_t first_classes = variant == CifarVariant::kCifar10 ? 10 : 20;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = b.data() + i * rec;
    if (r[0] >= first_classes) throw FormatError(path.string() + ": label out of range", i * rec);
    first[i] = r[0];
    if (lb == 2) {
      if (r[1] >= 100) throw FormatError(path.string() + ": fine label out of range", i * rec + 1);
      second[i] = r[1];
    }
    float* dst = ds.images.data() + i * kCifarPixels;
    for (std::size_t k = 0; k < kCifarPixels; ++k) dst[k] = static_cast<float>(r[lb + k]) / 255.0f;
  }
  if (variant == CifarVariant::kCifar10) {
    ds.label_sets.push_back({LabelScheme::kCifar10Class, 10, std::move(first)});
  } else {
    ds.label_sets.push_back({LabelScheme::kCoarse, 20, std::move(first)});
    ds.label_sets.push_back({LabelScheme::kFine, 100, std::move(second)});
  }
  ds.provenance = {{"file", path.string()}, {"rows", n}};
  return ds;
}

void write_cifar_file(const fs::path& path, const LabeledDataset& ds, CifarVariant variant) {
  if (ds.channels() != 3 || ds.height() != 32 || ds.width() != 32) {
    throw DimensionError("write_cifar_file: images must be 3x32x32");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string(), 0);
  const auto& first = ds.labels(variant == CifarVariant::kCifar10 ? LabelScheme::kCifar10Class : LabelScheme::kCoarse);
  std::vector<unsigned char> rec(label_bytes(variant) + kCifarPixels);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    rec[0] = static_cast<unsigned char>(first.values[i]);
    if (variant == CifarVariant::kCifar100) rec[1] = static_cast<unsigned char>(ds.labels(LabelScheme::kFine).values[i]);
    const float* src = ds.images.data() + i * kCifarPixels;
    for (std::size_t k = 0; k < kCifarPixels; ++k) {
      rec[label_bytes(variant) + k] = static_cast<unsigned char>(std::lround(std::clamp(src[k], 0.0f, 1.0f) * 255.0f));
    }
    os.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

DatasetPair load_cifar(const fs::path& dir, CifarVariant variant) {
  auto resolve = [&](const std::string& name) {
    const std::string sub = variant == CifarVariant::kCifar10 ? "cifar-10-batches-bin" : "cifar-100-binary";
    for (const auto& p : {dir / name, dir / sub / name}) {
      if (fs::exists(p)) return p;
    }
    throw FormatError(name + " not found under " + dir.string(), 0);
  };
  DatasetPair out;
  if (variant == CifarVariant::kCifar10) {
    std::vector<LabeledDataset> parts;
    for (int i = 1; i <= 5; ++i) {
      parts.push_back(read_cifar_file(resolve("data_batch_" + std::to_string(i) + ".bin"), variant, Split::kTrain));
    }
    out.train = concat(std::move(parts));
    out.test = read_cifar_file(resolve("test_batch.bin"), variant, Split::kTest);
  } else {
    out.train = read_cifar_file(resolve("train.bin"), variant, Split::kTrain);
    out.test = read_cifar_file(resolve("test.bin"), variant, Split::kTest);
  }
  return out;
}

DatasetPair cifar100_coarse_subset(const DatasetPair& data) {
  constexpr std::int32_t kKeep = 3;
  // Fine ids present under each kept coarse class, over both splits.
  std::vector<std::vector<std::int32_t>> fine_of(kKeep);
  for (const auto* ds : {&data.train, &data.test}) {
    const auto& coarse = ds->labels(LabelScheme::kCoarse).values;
    const auto& fine = ds->labels(LabelScheme::kFine).values;
    for (std::size_t i = 0; i < ds->size(); ++i) {
      if (coarse[i] < kKeep) fine_of[coarse[i]].push_back(fine[i]);
    }
  }
  std::vector<std::int32_t> remap(100, -1);
  std::int32_t next = 0;
  for (auto& f : fine_of) {
    std::sort(f.begin(), f.end());
    f.erase(std::unique(f.begin(), f.end()), f.end());
    for (auto id : f) {
      if (remap[id] != -1) throw FormatError("cifar100: fine label " + std::to_string(id) + " under two coarse classes", 0);
      remap[id] = next++;
    }
  }

  auto pick = [&](const LabeledDataset& ds) {
    const auto& coarse = ds.labels(LabelScheme::kCoarse).values;
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (coarse[i] < kKeep) rows.push_back(i);
    }
    if (rows.empty()) throw ContractError("cifar100_coarse_subset: no images in the kept coarse classes");
    LabeledDataset out = ds.subset(rows);
    out.name = "cifar100-subset";
    for (auto& l : out.label_sets) {
      if (l.scheme == LabelScheme::kCoarse) l.classes = kKeep;
      if (l.scheme == LabelScheme::kFine) {
        for (auto& v : l.values) v = remap[v];
        l.classes = static_cast<std::size_t>(next);
      }
    }
    out.provenance = {{"source", ds.provenance}, {"coarse_kept", {0, 1, 2}}, {"fine_classes", next}};
    return out;
  };
  return {pick(data.train), pick(data.test)};
}

AugmentationPolicy AugmentationPolicy::cifar10(std::vector<float> channel_means) {
  AugmentationPolicy p;
  p.max_shift_fraction = 0.1;
  p.max_rotation = std::numbers::pi / 6;
  p.horizontal_flip = true;
  p.fill = std::move(channel_means);
  return p;
}

void AugmentationPolicy::validate() const {
  if (!(max_shift_fraction >= 0 && max_shift_fraction <= 1)) throw ContractError("augmentation: shift fraction must be in [0,1]");
  if (!(max_rotation >= 0 && max_rotation <= std::numbers::pi)) throw ContractError("augmentation: rotation must be in [0, pi]");
  if (fill.empty()) throw ContractError("augmentation: fill value required");
}

Tensor<float> augment_batch(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng) {
  policy.validate();
  if (batch.rank() != 4) throw DimensionError("augment_batch: expected [N,C,H,W], got " + shape_str(batch.shape()));
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  if (policy.fill.size() != 1 && policy.fill.size() != C) {
    throw ContractError("augment_batch: fill must have 1 or " + std::to_string(C) + " values");
  }
  std::vector<float> fill(C);
  for (std::size_t c = 0; c < C; ++c) fill[c] = policy.fill[policy.fill.size() == 1 ? 0 : c];
  if (policy.is_identity()) return batch;

  Tensor<float> out(batch.shape());
  const std::size_t plane = C * H * W;
  for (std::size_t n = 0; n < N; ++n) {
    const double dx = rng.uniform(-1, 1) * policy.max_shift_fraction * static_cast<double>(W);
    const double dy = rng.uniform(-1, 1) * policy.max_shift_fraction * static_cast<double>(H);
    const double angle = rng.uniform(-1, 1) * policy.max_rotation;
    const bool flip = policy.horizontal_flip && rng.uniform() < 0.5;
    // Output -> input: undo the translation, then the rotation, then the flip.
    Affine2d map = Affine2d::rotation(-angle) * Affine2d::translation(-dx, -dy);
    if (flip) map = Affine2d::flip_horizontal() * map;
    resample_affine<float>(batch.data() + n * plane, out.data() + n * plane, C, H, W, map, fill);
  }
  return out;
}

std::vector<float> channel_means(const LabeledDataset& ds) {
  const std::size_t C = ds.channels(), hw = ds.height() * ds.width();
  std::vector<double> acc(C, 0.0);
  for (std::size_t n = 0; n < ds.size(); ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const float* p = ds.images.data() + (n * C + c) * hw;
      acc[c] += std::accumulate(p, p + hw, 0.0);
    }
  }
  std::vector<float> out(C);
  for (std::size_t c = 0; c < C; ++c) out[c] = static_cast<float>(acc[c] / static_cast<double>(ds.size() * hw));
  return out;
}

namespace {
constexpr char kDatasetMagic[8] = {'A', 'B', 'D', 'S', 'E', 'T', 0, 0};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const fs::path& path, const LabeledDataset& ds) {
  ds.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string(), 0);
  os.write(kDatasetMagic, 8);
  binio::write_u32(os, kDatasetVersion);
  binio::write_string(os, ds.name);
  binio::write_u32(os, static_cast<std::uint32_t>(ds.split));
  binio::write_string(os, ds.provenance.dump());
  for (std::size_t d = 0; d < 4; ++d) binio::write_u64(os, ds.images.dim(d));
  binio::write_u32(os, static_cast<std::uint32_t>(ds.label_sets.size()));
  for (const auto& l : ds.label_sets) {
    binio::write_string(os, scheme_name(l.scheme));
    binio::write_u64(os, l.classes);
    binio::write_i32_array(os, l.values.data(), l.values.size());
  }
  binio::write_f32_array(os, ds.images.data(), ds.images.numel());
  if (!os) throw FormatError("write failed for " + path.string(), 0);
}

LabeledDataset load_dataset(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string(), 0);
  binio::Reader r(is, path.string());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kDatasetMagic, 8) != 0) r.fail("bad dataset magic");
  if (r.u32() != kDatasetVersion) r.fail("unsupported dataset version");
  LabeledDataset ds;
  ds.name = r.string();
  const auto split = r.u32();
  if (split > 1) r.fail("bad split");
  ds.split = static_cast<Split>(split);
  try {
    ds.provenance = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception&) {
    r.fail("bad provenance JSON");
  }
  Shape shape(4);
  for (auto& d : shape) {
    d = r.u64();
    if (d == 0 || d > (1u << 26)) r.fail("bad image dimension");
  }
  const auto sets = r.u32();
  if (sets == 0 || sets > 8) r.fail("bad label-set count");
  for (std::uint32_t k = 0; k < sets; ++k) {
    LabelSet l;
    try {
      l.scheme = parse_scheme(r.string(64));
    } catch (const ContractError&) {
      r.fail("unknown label scheme");
    }
    l.classes = r.u64();
    l.values.resize(shape[0]);
    r.i32_array(l.values.data(), l.values.size());
    ds.label_sets.push_back(std::move(l));
  }
  ds.images = Tensor<float>(shape);
  r.f32_array(ds.images.data(), ds.images.numel());
  r.expect_end();
  try {
    ds.validate();
  } catch (const ContractError& e) {
    r.fail(e.what());
  }
  return ds;
}

}  // namespace atlasbench::data
