#include "atlasbench/viz.hpp"

#include <algorithm>
#include <cmath>

#include "atlasbench/optim.hpp"
#include "atlasbench/parallel.hpp"

namespace atlasbench::viz {

std::string mode_name(ObjectiveMode m) { return m == ObjectiveMode::kCosinePower ? "cosine-power" : "angle-power"; }

ObjectiveMode parse_mode(std::string_view s) {
  if (s == "cosine-power") return ObjectiveMode::kCosinePower;
  if (s == "angle-power" || s == "paper-literal") return ObjectiveMode::kAnglePower;
  throw ContractError("unknown objective mode '" + std::string(s) + "' (expected cosine-power or angle-power)");
}

std::string parameterization_name(Parameterization p) {
  return p == Parameterization::kPixel ? "pixel" : "fourier-decorrelated";
}

Parameterization parse_parameterization(std::string_view s) {
  if (s == "pixel") return Parameterization::kPixel;
  if (s == "fourier-decorrelated" || s == "fourier") return Parameterization::kFourier;
  throw ContractError("unknown parameterization '" + std::string(s) + "' (expected pixel or fourier-decorrelated)");
}

void VizTarget::validate() const {
  double norm = 0;
  for (double v : direction) {
    if (!std::isfinite(v)) throw ContractError("viz target: non-finite direction");
    norm += v * v;
  }
  if (direction.empty() || norm == 0) throw ContractError("viz target: zero direction");
}

void VizConfig::validate() const {
  if (!(learning_rate > 0)) throw ContractError("viz: learning rate must be positive");
  if (jitter_px < 0) throw ContractError("viz: jitter must be non-negative");
  if (!(scale_min > 0 && scale_max < 2 && scale_min <= scale_max)) {
    throw ContractError("viz: scale range must lie inside (0, 2)");
  }
  if (!(rotation >= 0 && rotation <= std::numbers::pi)) throw ContractError("viz: rotation range must be in [0, pi]");
  if (!(init_low >= 0 && init_high <= 1 && init_low <= init_high)) {
    throw ContractError("viz: init range must lie inside [0, 1]");
  }
}

nlohmann::json VizConfig::to_json() const {
  return {{"steps", steps},
          {"learning_rate", learning_rate},
          {"jitter_px", jitter_px},
          {"scale_min", scale_min},
          {"scale_max", scale_max},
          {"rotation", rotation},
          {"pad_fill", pad_fill},
          {"init_low", init_low},
          {"init_high", init_high},
          {"objective_mode", mode_name(mode)},
          {"parameterization", parameterization_name(parameterization)},
          {"seed", seed}};
}

VizConfig VizConfig::from_json(const nlohmann::json& j) {
  VizConfig c;
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.jitter_px = j.value("jitter_px", c.jitter_px);
  c.scale_min = j.value("scale_min", c.scale_min);
  c.scale_max = j.value("scale_max", c.scale_max);
  c.rotation = j.value("rotation", c.rotation);
  c.pad_fill = j.value("pad_fill", c.pad_fill);
  c.init_low = j.value("init_low", c.init_low);
  c.init_high = j.value("init_high", c.init_high);
  c.mode = parse_mode(j.value("objective_mode", mode_name(c.mode)));
  c.parameterization = parse_parameterization(j.value("parameterization", parameterization_name(c.parameterization)));
  c.seed = j.value("seed", c.seed);
  return c;
}

std::string VizConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

bool VizConfig::transforms_disabled() const {
  return jitter_px == 0 && scale_min == 1.0 && scale_max == 1.0 && rotation == 0.0;
}

namespace {

struct Geometry {
  double dot = 0, hn = 0, yn = 0;
};

Geometry geometry(std::span<const double> h, std::span<const double> y) {
  if (h.size() != y.size()) {
    throw DimensionError("objective: activation width " + std::to_string(h.size()) + " != target width " +
                         std::to_string(y.size()));
  }
  Geometry g;
  for (std::size_t i = 0; i < h.size(); ++i) {
    g.dot += h[i] * y[i];
    g.hn += h[i] * h[i];
    g.yn += y[i] * y[i];
  }
  g.hn = std::sqrt(g.hn);
  g.yn = std::sqrt(g.yn);
  if (g.yn == 0) throw ContractError("objective: zero target");
  return g;
}

}  // namespace

ObjectiveGradient objective_with_gradient(std::span<const double> h, std::span<const double> y, ObjectiveMode mode) {
  const auto g = geometry(h, y);
  const std::size_t n = h.size();
  ObjectiveGradient out;
  out.gradient.assign(n, 0.0);
  // Zero-norm h: angle pi/2, cosine 0.
  const double cosv = g.hn > 0 ? std::clamp(g.dot / (g.hn * g.yn), -1.0, 1.0) : 0.0;
  // d cos / d h = y / (|h||y|) - cos h / |h|^2
  auto dcos = [&](std::size_t i) { return y[i] / (g.hn * g.yn) - cosv * h[i] / (g.hn * g.hn); };

  if (mode == ObjectiveMode::kCosinePower) {
    const double c = std::max(0.1, cosv);
    out.value = g.dot * std::pow(c, 4);
    const bool active = cosv > 0.1 && g.hn > 0;
    for (std::size_t i = 0; i < n; ++i) {
      out.gradient[i] = y[i] * std::pow(c, 4) + (active ? g.dot * 4 * std::pow(c, 3) * dcos(i) : 0.0);
    }
  } else {
    const double angle = std::acos(cosv);
    const double a = std::max(0.1, angle);
    out.value = g.dot * std::pow(a, 4);
    const bool active = angle > 0.1 && g.hn > 0;
    const double sin_angle = std::max(std::sqrt(1.0 - cosv * cosv), 1e-12);
    for (std::size_t i = 0; i < n; ++i) {
      const double dangle = active ? -dcos(i) / sin_angle : 0.0;
      out.gradient[i] = y[i] * std::pow(a, 4) + g.dot * 4 * std::pow(a, 3) * dangle;
    }
  }
  return out;
}

double objective(std::span<const double> h, std::span<const double> y, ObjectiveMode mode) {
  return objective_with_gradient(h, y, mode).value;
}

Affine2d sample_transform(const VizConfig& config, Rng& rng) {
  config.validate();
  auto jitter = [&](int px) {
    if (px == 0) return Affine2d::identity();
    const auto span = static_cast<std::uint64_t>(2 * px + 1);
    const double dx = static_cast<double>(rng.below(span)) - px;
    const double dy = static_cast<double>(rng.below(span)) - px;
    return Affine2d::translation(dx, dy);
  };
  const Affine2d j1 = jitter(config.jitter_px);
  const double s = config.scale_min == config.scale_max ? config.scale_min : rng.uniform(config.scale_min, config.scale_max);
  const double r = config.rotation == 0 ? 0.0 : rng.uniform(-config.rotation, config.rotation);
  const Affine2d j2 = jitter(config.jitter_px == 0 ? 0 : 1);
  // Forward map (input -> output) is j2 * R * S * j1; sampling uses its inverse.
  auto inv_translation = [](const Affine2d& t) { return Affine2d::translation(-t.m[2], -t.m[5]); };
  return inv_translation(j1) * Affine2d::scaling(1.0 / s) * Affine2d::rotation(-r) * inv_translation(j2);
}

std::uint64_t target_seed(const VizConfig& config, const VizTarget& target) {
  return derive_seed({config.seed, static_cast<std::uint64_t>(target.kind), target.index});
}

namespace {

// Orthonormal 2-D DCT-II basis, rows scaled down with spatial frequency:
// x = z * basis + 0.5 per channel.
Tensor<float> fourier_basis(std::size_t H, std::size_t W) {
  const std::size_t P = H * W;
  Tensor<float> b({P, P});
  const double N = static_cast<double>(std::max(H, W));
  for (std::size_t ky = 0; ky < H; ++ky) {
    for (std::size_t kx = 0; kx < W; ++kx) {
      const double f = std::hypot(ky / (2.0 * H), kx / (2.0 * W));
      const double scale = 1.0 / std::max(f * N, 1.0);
      const double ay = ky == 0 ? std::sqrt(1.0 / H) : std::sqrt(2.0 / H);
      const double ax = kx == 0 ? std::sqrt(1.0 / W) : std::sqrt(2.0 / W);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const double phi = ay * std::cos(std::numbers::pi * (y + 0.5) * ky / H) * ax *
                             std::cos(std::numbers::pi * (x + 0.5) * kx / W);
          b[(ky * W + kx) * P + y * W + x] = static_cast<float>(scale * phi);
        }
      }
    }
  }
  return b;
}

std::vector<double> flat_activation(const Var<float>& h) {
  const auto& v = h.value();
  return std::vector<double>(v.storage().begin(), v.storage().end());
}

double cosine(std::span<const double> h, std::span<const double> y) {
  const auto g = geometry(h, y);
  return g.hn > 0 ? g.dot / (g.hn * g.yn) : 0.0;
}

class Optimizer {
 public:
  Optimizer(const model::ModelParams& frozen, const VizTarget& target, const VizConfig& config)
      : params_(frozen), target_(target), config_(config) {
    const auto& spec = frozen.spec;
    C_ = spec.channels;
    H_ = spec.height;
    W_ = spec.width;
    spatial_ = frozen.is_spatial_tap(target.layer);
    if (!frozen.has_tap(target.layer)) {
      std::string list;
      for (const auto& t : frozen.taps()) list += (list.empty() ? "" : ", ") + t;
      throw ContractError("unknown layer '" + target.layer + "'; available taps: " + list);
    }
    if (frozen.tap_width(target.layer) != target.direction.size()) {
      throw DimensionError("viz: target width " + std::to_string(target.direction.size()) + " != layer '" +
                           target.layer + "' width " + std::to_string(frozen.tap_width(target.layer)));
    }
  }

  VizResult run() {
    Rng rng(target_seed(config_, target_));
    Tensor<float> x0({1, C_, H_, W_});
    for (auto& v : x0.storage()) v = static_cast<float>(rng.uniform(config_.init_low, config_.init_high));

    Var<float> param;
    if (config_.parameterization == Parameterization::kPixel) {
      param = Var<float>::leaf(x0);
    } else {
      basis_ = Var<float>::constant(fourier_basis(H_, W_));
      const std::size_t P = H_ * W_;
      param = Var<float>::leaf(analyze(x0));
      half_ = Var<float>::constant(Tensor<float>({C_, P}, 0.5f));
      minus_one_ = Var<float>::constant(Tensor<float>({C_, P}, -1.0f));
    }

    VizResult out;
    out.layer = target_.layer;
    out.kind = target_.kind;
    out.index = target_.index;
    out.config_hash = config_.hash();
    out.config = config_.to_json();
    out.initial_alignment = alignment(image_of(param));

    auto opt = OptimizerState<float>::adam(config_.learning_rate);
    std::vector<Var<float>> leaves{param};
    const bool identity = config_.transforms_disabled();
    const double sign = config_.mode == ObjectiveMode::kCosinePower ? -1.0 : 1.0;
    for (std::size_t step = 0; step < config_.steps; ++step) {
      Var<float> x = image_var(param);
      if (!identity) {
        x = ops::affine_transform_2d(x, sample_transform(config_, rng), static_cast<float>(config_.pad_fill));
      }
      const Var<float> h = activation(x);
      const auto hv = flat_activation(h);
      const auto obj = objective_with_gradient(hv, target_.direction, config_.mode);
      if (!std::isfinite(obj.value)) {
        throw NumericError("viz: non-finite objective at step " + std::to_string(step));
      }
      out.trace.push_back(obj.value);
      Tensor<float> coeff(h.shape());
      for (std::size_t i = 0; i < coeff.numel(); ++i) coeff[i] = static_cast<float>(sign * obj.gradient[i]);
      const auto loss = ops::sum(ops::mul(h, Var<float>::constant(std::move(coeff))));
      const auto grads = backward(loss);
      optimizer_step(opt, leaves, grads);
      if (config_.parameterization == Parameterization::kPixel) {
        for (auto& v : param.mutable_value().storage()) v = std::clamp(v, 0.0f, 1.0f);
      }
    }
    out.image = image_of(param).reshaped({C_, H_, W_});
    out.final_alignment = alignment(out.image.reshaped({1, C_, H_, W_}));
    if (!out.image.all_finite()) throw NumericError("viz: non-finite image");
    return out;
  }

 private:
  // Coefficients of an image; rows of the basis are orthogonal with norm `scale`,
  // so z_k = <row_k, x - 0.5> / scale^2.
  Tensor<float> analyze(const Tensor<float>& x) const {
    const std::size_t P = H_ * W_;
    const auto& b = basis_.value();
    Tensor<float> z({C_, P});
    for (std::size_t k = 0; k < P; ++k) {
      double norm2 = 0;
      for (std::size_t p = 0; p < P; ++p) norm2 += static_cast<double>(b[k * P + p]) * b[k * P + p];
      for (std::size_t c = 0; c < C_; ++c) {
        double dot = 0;
        for (std::size_t p = 0; p < P; ++p) dot += b[k * P + p] * (x[c * P + p] - 0.5);
        z[c * P + k] = static_cast<float>(dot / norm2);
      }
    }
    return z;
  }

  Var<float> image_var(const Var<float>& param) const {
    if (config_.parameterization == Parameterization::kPixel) return param;
    // clamp(u, 0, 1) = relu(u) - relu(u - 1); saturated pixels pass no gradient.
    const auto u = ops::add(ops::matmul(param, basis_), half_);
    const auto over = ops::relu(ops::add(u, minus_one_));
    const auto x = ops::add(ops::relu(u), ops::mul(over, minus_one_));
    return ops::reshape(x, {1, C_, H_, W_});
  }

  Tensor<float> image_of(const Var<float>& param) const {
    NoGradGuard guard;
    auto x = image_var(param).value();
    for (auto& v : x.storage()) v = std::clamp(v, 0.0f, 1.0f);
    return x;
  }

  Var<float> activation(const Var<float>& x) const {
    auto h = model::forward_to(params_, x, target_.layer);
    if (spatial_) h = ops::mean(h, {2, 3});
    return ops::reshape(h, {target_.direction.size()});
  }

  double alignment(const Tensor<float>& x) const {
    NoGradGuard guard;
    return cosine(flat_activation(activation(Var<float>::constant(x))), target_.direction);
  }

  const model::ModelParams& params_;
  const VizTarget& target_;
  const VizConfig& config_;
  std::size_t C_ = 1, H_ = 28, W_ = 28;
  bool spatial_ = false;
  Var<float> basis_, half_, minus_one_;
};

}  // namespace

VizResult optimize_input(const model::ModelParams& params, const VizTarget& target, const VizConfig& config) {
  config.validate();
  target.validate();
  const auto frozen = model::frozen_copy(params);
  return Optimizer(frozen, target, config).run();
}

std::vector<RenderOutcome> render_targets(const model::ModelParams& params, std::span<const VizTarget> targets,
                                          const VizConfig& config) {
  config.validate();
  const auto frozen = model::frozen_copy(params);
  std::vector<RenderOutcome> out(targets.size());
  parallel_for(targets.size(), 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      out[i].index = targets[i].index;
      try {
        targets[i].validate();
        out[i].result = Optimizer(frozen, targets[i], config).run();
      } catch (const std::exception& e) {
        out[i].error = "target " + std::to_string(targets[i].index) + ": " + e.what();
      }
    }
  });
  return out;
}

std::vector<VizTarget> atlas_targets(const atlas::AtlasGrid& grid) {
  std::vector<VizTarget> out;
  const std::size_t n = grid.width();
  for (std::size_t c = 0; c < grid.cells(); ++c) {
    if (!grid.mask[c]) continue;
    VizTarget t;
    t.direction.assign(grid.directions.data() + c * n, grid.directions.data() + (c + 1) * n);
    t.layer = grid.layer;
    t.kind = TargetKind::kAtlasCell;
    t.index = c;
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<VizTarget> neuron_targets(const std::vector<atlas::NeuronDirection>& neurons, const std::string& layer) {
  std::vector<VizTarget> out;
  for (const auto& nd : neurons) {
    out.push_back({std::vector<double>(nd.direction.begin(), nd.direction.end()), layer, TargetKind::kNeuron, nd.index});
  }
  return out;
}

}  // namespace atlasbench::viz
