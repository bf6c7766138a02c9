#include "atlasbench/model.hpp"

#include <cmath>
#include <fstream>

#include "atlasbench/ops.hpp"

namespace atlasbench::model {

namespace {

constexpr std::size_t kFilter = 3;
const std::vector<std::string> kCnnTaps = {"input",  "conv1a", "conv1b",         "pool1", "conv2a",
                                           "conv2b", "pool2",  "fc-penultimate", "logits"};

Tensor<float> gaussian(Rng& rng, Shape shape, double variance) {
  Tensor<float> t(std::move(shape));
  const double sd = std::sqrt(variance);
  for (auto& v : t.storage()) v = static_cast<float>(rng.normal() * sd);
  return t;
}

std::string hidden_name(std::size_t i) { return "hidden" + std::to_string(i + 1); }

}  // namespace

ModelSpec ModelSpec::mlp(std::size_t channels, std::size_t height, std::size_t width,
                         std::vector<std::size_t> hidden, std::size_t classes) {
  ModelSpec s;
  s.kind = ModelKind::kMlp;
  s.channels = channels;
  s.height = height;
  s.width = width;
  s.hidden_widths = std::move(hidden);
  s.classes = classes;
  s.validate();
  return s;
}

ModelSpec ModelSpec::cnn(std::size_t channels, std::size_t height, std::size_t width, ConvPlan conv,
                         std::size_t penultimate, std::size_t classes) {
  ModelSpec s;
  s.kind = ModelKind::kCnn;
  s.channels = channels;
  s.height = height;
  s.width = width;
  s.conv = conv;
  s.penultimate = penultimate;
  s.classes = classes;
  s.validate();
  return s;
}

std::size_t ModelSpec::depth() const { return kind == ModelKind::kMlp ? hidden_widths.size() : 5; }

std::size_t ModelSpec::penultimate_width() const {
  return kind == ModelKind::kMlp ? hidden_widths.back() : penultimate;
}

void ModelSpec::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw ContractError("ModelSpec: input dimensions must be positive");
  if (classes < 2) throw ContractError("ModelSpec: need at least 2 output classes");
  if (kind == ModelKind::kMlp) {
    if (hidden_widths.empty()) throw ContractError("ModelSpec: mlp depth must be >= 1");
    for (auto w : hidden_widths) {
      if (w == 0) throw ContractError("ModelSpec: hidden widths must be positive");
    }
  } else {
    if (conv.block1 == 0 || conv.block2 == 0 || penultimate == 0) {
      throw ContractError("ModelSpec: cnn filter counts and penultimate width must be positive");
    }
    if (height < 4 || width < 4) throw ContractError("ModelSpec: cnn input must be at least 4x4 (two pools)");
    if (!hidden_widths.empty()) throw ContractError("ModelSpec: cnn takes no hidden_widths list");
  }
}

nlohmann::json ModelSpec::to_json() const {
  nlohmann::json j;
  j["kind"] = kind == ModelKind::kMlp ? "mlp" : "cnn";
  j["input"] = {channels, height, width};
  j["classes"] = classes;
  if (kind == ModelKind::kMlp) {
    j["hidden_widths"] = hidden_widths;
  } else {
    j["conv_filters"] = {conv.block1, conv.block2};
    j["penultimate"] = penultimate;
  }
  return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
  try {
    const auto input = j.at("input").get<std::vector<std::size_t>>();
    if (input.size() != 3) throw ContractError("ModelSpec: 'input' needs [channels, height, width]");
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "mlp") {
      return mlp(input[0], input[1], input[2], j.at("hidden_widths").get<std::vector<std::size_t>>(),
                 j.at("classes").get<std::size_t>());
    }
    if (kind == "cnn") {
      const auto f = j.at("conv_filters").get<std::vector<std::size_t>>();
      if (f.size() != 2) throw ContractError("ModelSpec: 'conv_filters' needs two entries");
      return cnn(input[0], input[1], input[2], ConvPlan{f[0], f[1]}, j.at("penultimate").get<std::size_t>(),
                 j.at("classes").get<std::size_t>());
    }
    throw ContractError("ModelSpec: unknown kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("ModelSpec: malformed description: ") + e.what());
  }
}

std::vector<Var<float>> ModelParams::parameters() const {
  std::vector<Var<float>> out;
  for (const auto& l : layers) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  return out;
}

std::vector<std::string> ModelParams::taps() const {
  if (spec.kind == ModelKind::kCnn) return kCnnTaps;
  std::vector<std::string> out{"input"};
  for (std::size_t i = 0; i < spec.hidden_widths.size(); ++i) out.push_back(hidden_name(i));
  out.push_back("fc-penultimate");
  out.push_back("logits");
  return out;
}

bool ModelParams::has_tap(std::string_view name) const {
  const auto t = taps();
  return std::find(t.begin(), t.end(), name) != t.end();
}

bool ModelParams::is_spatial_tap(std::string_view name) const {
  return spec.kind == ModelKind::kCnn && name != "input" && name != "fc-penultimate" && name != "logits";
}

std::size_t ModelParams::tap_width(std::string_view name) const {
  if (!has_tap(name)) throw ContractError("unknown tap '" + std::string(name) + "'");
  if (name == "input") return spec.input_dim();
  if (name == "logits") return spec.classes;
  if (name == "fc-penultimate") return spec.penultimate_width();
  if (spec.kind == ModelKind::kMlp) {
    return spec.hidden_widths.at(std::stoul(std::string(name.substr(6))) - 1);
  }
  return (name == "conv1a" || name == "conv1b" || name == "pool1") ? spec.conv.block1 : spec.conv.block2;
}

ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams params;
  params.spec = spec;
  params.seed = seed;
  Rng rng(derive_seed({seed, 0x6d6f64656cULL}));

  auto fc = [&](const std::string& name, std::size_t in, std::size_t out, bool last) {
    const double var = (last ? 1.0 : 2.0) / static_cast<double>(in);
    params.layers.push_back(Layer{name, Var<float>::leaf(gaussian(rng, {in, out}, var)),
                                  Var<float>::leaf(Tensor<float>({out}))});
  };
  auto conv = [&](const std::string& name, std::size_t in, std::size_t out) {
    const double var = 2.0 / static_cast<double>(in * kFilter * kFilter);
    params.layers.push_back(Layer{name, Var<float>::leaf(gaussian(rng, {out, in, kFilter, kFilter}, var)),
                                  Var<float>::leaf(Tensor<float>({out}))});
  };

  if (spec.kind == ModelKind::kMlp) {
    std::size_t in = spec.input_dim();
    for (std::size_t i = 0; i < spec.hidden_widths.size(); ++i) {
      fc(hidden_name(i), in, spec.hidden_widths[i], false);
      in = spec.hidden_widths[i];
    }
    fc("logits", in, spec.classes, true);
  } else {
    conv("conv1a", spec.channels, spec.conv.block1);
    conv("conv1b", spec.conv.block1, spec.conv.block1);
    conv("conv2a", spec.conv.block1, spec.conv.block2);
    conv("conv2b", spec.conv.block2, spec.conv.block2);
    const std::size_t flat = spec.conv.block2 * (spec.height / 4) * (spec.width / 4);
    fc("fc-penultimate", flat, spec.penultimate, false);
    fc("logits", spec.penultimate, spec.classes, true);
  }
  return params;
}

ModelParams frozen_copy(const ModelParams& params) {
  ModelParams out;
  out.spec = params.spec;
  out.seed = params.seed;
  for (const auto& l : params.layers) {
    out.layers.push_back(Layer{l.name, Var<float>::constant(l.weight.value()), Var<float>::constant(l.bias.value())});
  }
  return out;
}

ForwardResult forward(const ModelParams& params, const Var<float>& input, std::string_view stop_at) {
  const auto& spec = params.spec;
  if (!stop_at.empty() && !params.has_tap(stop_at)) {
    std::string list;
    for (const auto& t : params.taps()) list += (list.empty() ? "" : ", ") + t;
    throw ContractError("unknown layer '" + std::string(stop_at) + "'; available taps: " + list);
  }
  const Shape& s = input.shape();
  if (s.size() != 4 || s[1] != spec.channels || s[2] != spec.height || s[3] != spec.width) {
    throw DimensionError("forward: input shape " + shape_str(s) + " does not match model input [N, " +
                         std::to_string(spec.channels) + ", " + std::to_string(spec.height) + ", " +
                         std::to_string(spec.width) + "]");
  }
  const std::size_t batch = s[0];
  ForwardResult r;
  auto record = [&](const std::string& name, Var<float> v) {
    r.taps.emplace(name, v);
    r.output = std::move(v);
    return name == stop_at;
  };
  auto flat = ops::reshape(input, {batch, spec.input_dim()});
  if (record("input", flat)) return r;

  auto dense = [](const Var<float>& x, const Layer& l) { return ops::add(ops::matmul(x, l.weight), l.bias); };

  if (spec.kind == ModelKind::kMlp) {
    Var<float> h = flat;
    for (std::size_t i = 0; i < spec.hidden_widths.size(); ++i) {
      h = ops::relu(dense(h, params.layers[i]));
      if (record(hidden_name(i), h)) return r;
      if (i + 1 == spec.hidden_widths.size() && record("fc-penultimate", h)) return r;
    }
    record("logits", dense(h, params.layers.back()));
    return r;
  }

  auto conv = [](const Var<float>& x, const Layer& l) {
    return ops::relu(ops::conv2d(x, l.weight, l.bias, Padding::kSame));
  };
  Var<float> h = input;
  h = conv(h, params.layers[0]);
  if (record("conv1a", h)) return r;
  h = conv(h, params.layers[1]);
  if (record("conv1b", h)) return r;
  h = ops::maxpool2d(h);
  if (record("pool1", h)) return r;
  h = conv(h, params.layers[2]);
  if (record("conv2a", h)) return r;
  h = conv(h, params.layers[3]);
  if (record("conv2b", h)) return r;
  h = ops::maxpool2d(h);
  if (record("pool2", h)) return r;
  h = ops::reshape(h, {batch, h.value().numel() / batch});
  h = ops::relu(dense(h, params.layers[4]));
  if (record("fc-penultimate", h)) return r;
  record("logits", dense(h, params.layers[5]));
  return r;
}

Var<float> forward_to(const ModelParams& params, const Var<float>& input, std::string_view tap) {
  if (tap.empty()) throw ContractError("forward_to: empty tap name");
  return forward(params, input, tap).output;
}

std::size_t param_count(const ModelSpec& spec) {
  spec.validate();
  std::size_t total = 0;
  auto dense = [&](std::size_t in, std::size_t out) { total += in * out + out; };
  if (spec.kind == ModelKind::kMlp) {
    std::size_t in = spec.input_dim();
    for (auto w : spec.hidden_widths) {
      dense(in, w);
      in = w;
    }
    dense(in, spec.classes);
    return total;
  }
  auto conv = [&](std::size_t in, std::size_t out) { total += kFilter * kFilter * in * out + out; };
  conv(spec.channels, spec.conv.block1);
  conv(spec.conv.block1, spec.conv.block1);
  conv(spec.conv.block1, spec.conv.block2);
  conv(spec.conv.block2, spec.conv.block2);
  dense(spec.conv.block2 * (spec.height / 4) * (spec.width / 4), spec.penultimate);
  dense(spec.penultimate, spec.classes);
  return total;
}

WidthPlan plan_width(std::size_t depth, std::size_t input_dim, std::size_t output_dim, std::size_t max_width) {
  if (depth == 0 || input_dim == 0 || output_dim == 0 || max_width == 0) {
    throw ContractError("plan_width: depth and dimensions must be positive");
  }
  WidthPlan plan{depth, input_dim, output_dim, max_width, max_width};
  if (depth == 1) return plan;
  const double L = static_cast<double>(depth);
  const double n0 = static_cast<double>(input_dim);
  const double n_out = static_cast<double>(output_dim);
  const double n_max = static_cast<double>(max_width);
  const double b = L + n0 + n_out;
  const double root = std::sqrt(b * b + 4.0 * (L - 1.0) * (n0 + n_out + 1.0) * n_max);
  plan.width = static_cast<std::size_t>(std::floor((-b + root) / (2.0 * (L - 1.0))));
  return plan;
}

ConvPlan scale_cnn_filters(std::size_t penultimate) {
  if (penultimate == 0 || penultimate % 4 != 0) {
    const std::size_t lo = penultimate / 4 * 4;
    const std::size_t hi = lo + 4;
    const std::size_t nearest = (lo != 0 && penultimate - lo <= hi - penultimate) ? lo : hi;
    throw ContractError("scale_cnn_filters: penultimate width " + std::to_string(penultimate) +
                        " is not divisible by 4; nearest valid width is " + std::to_string(nearest));
  }
  return ConvPlan{penultimate / 4, penultimate / 4};
}

std::uint64_t params_checksum(const ModelParams& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params.parameters()) {
    h = fnv1a(p.value().data(), p.value().numel() * sizeof(float), h);
  }
  return h;
}

namespace {
constexpr char kMagic[8] = {'A', 'B', 'C', 'K', 'P', 'T', '\0', '\0'};
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, std::string_view config_hash) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  binio::write_u32(os, kCheckpointVersion);
  binio::write_string(os, params.spec.to_json().dump());
  binio::write_u64(os, params.seed);
  binio::write_string(os, config_hash);
  const auto ps = params.parameters();
  binio::write_u32(os, static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    binio::write_u32(os, static_cast<std::uint32_t>(p.shape().size()));
    for (auto d : p.shape()) binio::write_u32(os, static_cast<std::uint32_t>(d));
    binio::write_f32_array(os, p.value().data(), p.value().numel());
  }
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  binio::Reader r(is, path.string());
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) r.fail("not a checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  ModelSpec spec;
  try {
    spec = ModelSpec::from_json(nlohmann::json::parse(r.string()));
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("malformed model description: ") + e.what());
  }
  Checkpoint ck;
  const auto seed = r.u64();
  ck.config_hash = r.string();
  ck.params = build_model(spec, seed);
  auto ps = ck.params.parameters();
  const auto count = r.u32();
  if (count != ps.size()) r.fail("parameter count " + std::to_string(count) + " does not match architecture");
  for (auto& p : ps) {
    const auto ndim = r.u32();
    Shape shape(ndim);
    for (auto& d : shape) d = r.u32();
    if (shape != p.shape()) r.fail("parameter shape " + shape_str(shape) + " != expected " + shape_str(p.shape()));
    r.f32_array(p.mutable_value().data(), p.value().numel());
  }
  r.expect_end();
  return ck;
}

}  // namespace atlasbench::model
