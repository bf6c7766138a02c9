#include "atlasbench/atlas.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>

#include "atlasbench/parallel.hpp"

namespace atlasbench::atlas {

namespace fs = std::filesystem;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

ActivationSet collect_activations(const model::ModelParams& params, std::string_view layer, const Tensor<float>& images,
                                  std::span<const std::int32_t> labels, SpatialMode spatial, std::uint64_t seed,
                                  std::size_t batch_size) {
  if (!params.has_tap(layer)) {
    std::string list;
    for (const auto& t : params.taps()) list += (list.empty() ? "" : ", ") + t;
    throw ContractError("unknown layer '" + std::string(layer) + "'; available taps: " + list);
  }
  if (images.rank() != 4) throw DimensionError("collect_activations: images must be [count, C, H, W]");
  const std::size_t count = images.dim(0);
  if (!labels.empty() && labels.size() != count) throw DimensionError("collect_activations: label count mismatch");
  if (batch_size == 0) throw ContractError("collect_activations: batch size must be positive");

  const bool spatial_tap = params.is_spatial_tap(layer);
  const std::size_t n = params.tap_width(layer);
  ActivationSet out;
  out.layer = std::string(layer);
  out.checkpoint_hash = hex64(model::params_checksum(params));
  out.vectors = Tensor<float>({count, n});
  out.source_index.resize(count);
  std::iota(out.source_index.begin(), out.source_index.end(), 0);
  out.labels.assign(labels.begin(), labels.end());

  // Spatial extent of the tap: probe with one image.
  std::size_t th = 1, tw = 1;
  if (spatial_tap) {
    NoGradGuard guard;
    const auto probe = model::forward_to(params, Var<float>::constant(images.slice_rows(0, 1)), layer);
    th = probe.shape()[2];
    tw = probe.shape()[3];
    Rng rng(derive_seed({seed, 0x6c6f63}));
    out.locations.resize(count);
    for (auto& loc : out.locations) {
      if (spatial == SpatialMode::kRandom) {
        loc = {static_cast<std::int32_t>(rng.below(th)), static_cast<std::int32_t>(rng.below(tw))};
      } else {
        loc = {static_cast<std::int32_t>(th / 2), static_cast<std::int32_t>(tw / 2)};
      }
    }
  }

  parallel_for(count, batch_size, [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    const auto h = model::forward_to(params, Var<float>::constant(images.slice_rows(begin, end)), layer);
    const auto& v = h.value();
    for (std::size_t i = begin; i < end; ++i) {
      float* dst = out.vectors.data() + i * n;
      if (spatial_tap) {
        const auto [r, c] = out.locations[i];
        for (std::size_t ch = 0; ch < n; ++ch) dst[ch] = v.at(i - begin, ch, static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      } else {
        std::copy_n(v.data() + (i - begin) * n, n, dst);
      }
    }
  });
  if (!out.vectors.all_finite()) throw NumericError("collect_activations: non-finite activations");
  return out;
}

ActivationSet collect_raw(const Tensor<float>& images, std::span<const std::int32_t> labels) {
  if (images.rank() != 4) throw DimensionError("collect_raw: images must be [count, C, H, W]");
  const std::size_t count = images.dim(0);
  ActivationSet out;
  out.layer = "input";
  out.checkpoint_hash = "none";
  out.vectors = images.reshaped({count, images.numel() / count});
  out.source_index.resize(count);
  std::iota(out.source_index.begin(), out.source_index.end(), 0);
  out.labels.assign(labels.begin(), labels.end());
  return out;
}

GridAssignment bin_to_grid(const Tensor<float>& coords, std::size_t g) {
  if (g == 0) throw ContractError("bin_to_grid: grid size must be >= 1");
  if (coords.rank() != 2 || coords.dim(1) != 2) throw DimensionError("bin_to_grid: coords must be [count, 2]");
  const std::size_t count = coords.dim(0);
  GridAssignment out;
  out.g = g;
  float lo[2] = {coords.at(0, 0), coords.at(0, 1)}, hi[2] = {lo[0], lo[1]};
  for (std::size_t i = 0; i < count; ++i) {
    for (int a = 0; a < 2; ++a) {
      lo[a] = std::min(lo[a], coords.at(i, static_cast<std::size_t>(a)));
      hi[a] = std::max(hi[a], coords.at(i, static_cast<std::size_t>(a)));
    }
  }
  out.bounds = {lo[0], hi[0], lo[1], hi[1]};
  auto bin = [&](float v, int a) -> std::int32_t {
    const double span = static_cast<double>(hi[a]) - lo[a];
    if (span <= 0) return 0;
    const double t = (static_cast<double>(v) - lo[a]) / span * static_cast<double>(g);
    const auto c = static_cast<std::int64_t>(std::ceil(t)) - 1;
    return static_cast<std::int32_t>(std::clamp<std::int64_t>(c, 0, static_cast<std::int64_t>(g) - 1));
  };
  out.cells.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.cells[i] = bin(coords.at(i, 1), 1) * static_cast<std::int32_t>(g) + bin(coords.at(i, 0), 0);
  }
  return out;
}

std::vector<double> Whitening::apply(std::span<const double> v) const {
  const std::size_t n = mean.size();
  if (v.size() != n) throw DimensionError("Whitening::apply: width mismatch");
  std::vector<double> centered(n), out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) centered[i] = v[i] - mean[i];
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = matrix.data() + r * n;
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) s += row[c] * centered[c];
    out[r] = s;
  }
  return out;
}

std::vector<double> Whitening::invert(std::span<const double> w) const {
  const std::size_t n = mean.size();
  if (w.size() != n) throw DimensionError("Whitening::invert: width mismatch");
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = inverse.data() + r * n;
    double s = 0;
    for (std::size_t c = 0; c < n; ++c) s += row[c] * w[c];
    out[r] = s + mean[r];
  }
  return out;
}

Whitening fit_whitening(const Tensor<float>& vectors, double ridge_scale) {
  if (vectors.rank() != 2) throw DimensionError("fit_whitening: expected [count, n]");
  const std::size_t count = vectors.dim(0), n = vectors.dim(1);
  if (count < 2) throw ContractError("fit_whitening: need at least 2 vectors");

  Whitening w;
  w.mean.assign(n, 0.0);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t c = 0; c < n; ++c) w.mean[c] += vectors[i * n + c];
  for (auto& m : w.mean) m /= static_cast<double>(count);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  constexpr std::size_t kBlock = 2048;
  MatD block;
  for (std::size_t b = 0; b < count; b += kBlock) {
    const std::size_t rows = std::min(kBlock, count - b);
    block.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t c = 0; c < n; ++c)
        block(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = vectors[(b + i) * n + c] - w.mean[c];
    cov.selfadjointView<Eigen::Lower>().rankUpdate(block.transpose());
  }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= static_cast<double>(count - 1);

  w.ridge = ridge_scale * cov.trace() / static_cast<double>(n);
  cov.diagonal().array() += w.ridge;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("fit_whitening: eigendecomposition failed");
  w.min_eigenvalue = eig.eigenvalues().minCoeff();
  if (!(w.min_eigenvalue > 0)) {
    throw NumericError("fit_whitening: covariance not positive-definite after ridge (smallest eigenvalue " +
                       std::to_string(w.min_eigenvalue) + ")");
  }
  const auto& V = eig.eigenvectors();
  const Eigen::VectorXd inv_sqrt = eig.eigenvalues().array().rsqrt();
  const Eigen::VectorXd sqrt = eig.eigenvalues().array().sqrt();
  const Eigen::MatrixXd W = V * inv_sqrt.asDiagonal() * V.transpose();
  const Eigen::MatrixXd Winv = V * sqrt.asDiagonal() * V.transpose();
  w.matrix = Tensor<double>({n, n});
  w.inverse = Tensor<double>({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < n; ++c) {
      w.matrix[r * n + c] = W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      w.inverse[r * n + c] = Winv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
  }
  return w;
}

std::size_t AtlasGrid::occupied() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

AtlasGrid average_and_whiten(const ActivationSet& acts, const GridAssignment& assignment, std::size_t min_occupancy,
                             double ridge_scale) {
  const std::size_t count = acts.count(), n = acts.width(), g = assignment.g;
  if (assignment.cells.size() != count) {
    throw DimensionError("average_and_whiten: " + std::to_string(assignment.cells.size()) + " assignments for " +
                         std::to_string(count) + " activation rows");
  }
  AtlasGrid grid;
  grid.g = g;
  grid.layer = acts.layer;
  grid.checkpoint_hash = acts.checkpoint_hash;
  grid.min_occupancy = min_occupancy;
  grid.assignment = assignment;
  grid.counts.assign(g * g, 0);
  grid.mask.assign(g * g, 0);

  std::vector<double> sums(g * g * n, 0.0);
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = static_cast<std::size_t>(assignment.cells[i]);
    if (c >= g * g) throw ContractError("average_and_whiten: cell index out of range");
    ++grid.counts[c];
    const float* v = acts.vectors.data() + i * n;
    double* s = sums.data() + c * n;
    for (std::size_t k = 0; k < n; ++k) s[k] += v[k];
  }

  grid.whitening = fit_whitening(acts.vectors, ridge_scale);
  grid.cell_means = Tensor<double>({g * g, n});
  grid.directions = Tensor<double>({g * g, n});
  for (std::size_t c = 0; c < g * g; ++c) {
    if (grid.counts[c] == 0 || grid.counts[c] < min_occupancy) continue;
    grid.mask[c] = 1;
    std::vector<double> mean(n);
    for (std::size_t k = 0; k < n; ++k) mean[k] = sums[c * n + k] / grid.counts[c];
    const auto white = grid.whitening.apply(mean);
    std::copy(mean.begin(), mean.end(), grid.cell_means.data() + c * n);
    std::copy(white.begin(), white.end(), grid.directions.data() + c * n);
  }
  return grid;
}

std::vector<NeuronDirection> neuron_directions(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) {
    throw ContractError("neuron_directions: cannot pick " + std::to_string(count) + " distinct neurons out of " +
                        std::to_string(n));
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed({seed, 0x6e6575726f6e}));
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
  std::vector<NeuronDirection> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    out[i].index = idx[i];
    out[i].direction.assign(n, 0.0f);
    out[i].direction[idx[i]] = 1.0f;
  }
  return out;
}

namespace {

constexpr char kAtlasMagic[8] = {'A', 'B', 'A', 'T', 'L', 'A', 'S', 0};
constexpr std::uint32_t kAtlasVersion = 1;

void write_f64_as_f32(std::ostream& os, const double* data, std::size_t count) {
  std::vector<float> tmp(data, data + count);
  binio::write_f32_array(os, tmp.data(), count);
}

void read_f32_as_f64(binio::Reader& r, double* dst, std::size_t count) {
  std::vector<float> tmp(count);
  r.f32_array(tmp.data(), count);
  std::copy(tmp.begin(), tmp.end(), dst);
}

}  // namespace

void save_atlas(const fs::path& path, const AtlasGrid& grid) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string(), 0);
  const std::size_t n = grid.width(), cells = grid.cells();
  const nlohmann::json meta = {
      {"g", grid.g},
      {"layer", grid.layer},
      {"checkpoint_hash", grid.checkpoint_hash},
      {"min_occupancy", grid.min_occupancy},
      {"whitening", {{"source", "full-collection covariance"}, {"ridge", grid.whitening.ridge},
                     {"min_eigenvalue", grid.whitening.min_eigenvalue}}},
      {"bounds", grid.assignment.bounds},
      {"width", n},
      {"rows", grid.assignment.cells.size()}};
  os.write(kAtlasMagic, 8);
  binio::write_u32(os, kAtlasVersion);
  binio::write_string(os, meta.dump());
  binio::write_u64(os, grid.g);
  binio::write_u64(os, n);
  binio::write_u64(os, grid.assignment.cells.size());
  for (auto c : grid.counts) binio::write_u32(os, c);
  os.write(reinterpret_cast<const char*>(grid.mask.data()), static_cast<std::streamsize>(cells));
  binio::write_i32_array(os, grid.assignment.cells.data(), grid.assignment.cells.size());
  write_f64_as_f32(os, grid.directions.data(), cells * n);
  write_f64_as_f32(os, grid.cell_means.data(), cells * n);
  write_f64_as_f32(os, grid.whitening.mean.data(), n);
  write_f64_as_f32(os, grid.whitening.matrix.data(), n * n);
  write_f64_as_f32(os, grid.whitening.inverse.data(), n * n);
  if (!os) throw FormatError("write failed for " + path.string(), 0);
}

AtlasGrid load_atlas(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string(), 0);
  binio::Reader r(is, path.string());
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kAtlasMagic, 8) != 0) r.fail("bad atlas magic");
  if (r.u32() != kAtlasVersion) r.fail("unsupported atlas version");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception&) {
    r.fail("bad atlas metadata");
  }
  AtlasGrid grid;
  grid.g = r.u64();
  const std::size_t n = r.u64(), rows = r.u64();
  if (grid.g == 0 || grid.g > 4096 || n == 0 || n > (1u << 16) || rows > (1u << 28)) r.fail("bad atlas dimensions");
  const std::size_t cells = grid.g * grid.g;
  grid.layer = meta.value("layer", "");
  grid.checkpoint_hash = meta.value("checkpoint_hash", "");
  grid.min_occupancy = meta.value("min_occupancy", std::size_t{5});
  grid.whitening.ridge = meta.at("whitening").value("ridge", 0.0);
  grid.whitening.min_eigenvalue = meta.at("whitening").value("min_eigenvalue", 0.0);
  grid.assignment.g = grid.g;
  grid.assignment.bounds = meta.at("bounds").get<std::array<float, 4>>();
  grid.counts.resize(cells);
  for (auto& c : grid.counts) c = r.u32();
  grid.mask.resize(cells);
  r.bytes(grid.mask.data(), cells);
  grid.assignment.cells.resize(rows);
  r.i32_array(grid.assignment.cells.data(), rows);
  grid.directions = Tensor<double>({cells, n});
  grid.cell_means = Tensor<double>({cells, n});
  read_f32_as_f64(r, grid.directions.data(), cells * n);
  read_f32_as_f64(r, grid.cell_means.data(), cells * n);
  grid.whitening.mean.resize(n);
  read_f32_as_f64(r, grid.whitening.mean.data(), n);
  grid.whitening.matrix = Tensor<double>({n, n});
  grid.whitening.inverse = Tensor<double>({n, n});
  read_f32_as_f64(r, grid.whitening.matrix.data(), n * n);
  read_f32_as_f64(r, grid.whitening.inverse.data(), n * n);
  r.expect_end();
  return grid;
}

double circular_correlation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("circular_correlation: need two equal-length lists");
  auto mean_dir = [](std::span<const double> x) {
    double s = 0, c = 0;
    for (double v : x) {
      s += std::sin(v);
      c += std::cos(v);
    }
    return std::atan2(s, c);
  };
  const double ma = mean_dir(a), mb = mean_dir(b);
  std::complex<double> minus{0, 0}, plus{0, 0};
  double sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    minus += std::polar(1.0, a[i] - b[i]);
    plus += std::polar(1.0, a[i] + b[i]);
    sa += std::pow(std::sin(a[i] - ma), 2);
    sb += std::pow(std::sin(b[i] - mb), 2);
  }
  if (sa == 0 || sb == 0) return 0.0;
  // Form for uniformly distributed marginals, where the mean directions are
  // not identifiable.
  return (std::abs(minus) - std::abs(plus)) / (2.0 * std::sqrt(sa * sb));
}

std::vector<double> shift_angle_correlation(const Tensor<float>& coords, std::span<const std::int32_t> classes,
                                            std::span<const std::int32_t> shifts, std::size_t period) {
  if (coords.dim(0) != classes.size() || classes.size() != shifts.size()) {
    throw DimensionError("shift_angle_correlation: length mismatch");
  }
  std::map<std::int32_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < classes.size(); ++i) members[classes[i]].push_back(i);
  const auto max_class = members.empty() ? 0 : static_cast<std::size_t>(members.rbegin()->first);
  std::vector<double> out(max_class + 1, 0.0);
  for (const auto& [cls, rows] : members) {
    if (rows.size() < 2) continue;
    double cx = 0, cy = 0;
    for (auto i : rows) {
      cx += coords.at(i, 0);
      cy += coords.at(i, 1);
    }
    cx /= static_cast<double>(rows.size());
    cy /= static_cast<double>(rows.size());
    std::vector<double> theta, phi;
    for (auto i : rows) {
      theta.push_back(std::atan2(coords.at(i, 1) - cy, coords.at(i, 0) - cx));
      phi.push_back(2.0 * std::numbers::pi * shifts[i] / static_cast<double>(period));
    }
    out[static_cast<std::size_t>(cls)] = circular_correlation(theta, phi);
  }
  return out;
}

}  // namespace atlasbench::atlas
