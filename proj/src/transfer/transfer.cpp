#include "atlasbench/transfer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "atlasbench/ops.hpp"
#include "atlasbench/optim.hpp"
#include "atlasbench/parallel.hpp"

namespace atlasbench::transfer {

double LearningRate::resolve(std::size_t width) const {
  if (!inverse_width) return value;
  if (width == 0) throw ContractError("learning rate 1/n: width is zero");
  return 1.0 / static_cast<double>(width);
}

std::string LearningRate::str() const {
  if (inverse_width) return "1/n";
  std::ostringstream os;
  os.precision(17);
  os << value;
  return os.str();
}

LearningRate LearningRate::parse(std::string_view s) {
  LearningRate lr;
  if (s == "1/n") {
    lr.inverse_width = true;
    return lr;
  }
  try {
    std::size_t used = 0;
    lr.value = std::stod(std::string(s), &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ContractError("learning rate '" + std::string(s) + "' is neither a number nor 1/n");
  }
  if (!(lr.value >= 0) || !std::isfinite(lr.value)) throw ContractError("learning rate must be finite and >= 0");
  return lr;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
  if (batch_size < 1) throw ContractError("train config: batch size must be >= 1");
  if (!(momentum >= 0 && momentum < 1)) throw ContractError("train config: momentum must lie in [0, 1)");
  if (!learning_rate.inverse_width && !(learning_rate.value >= 0 && std::isfinite(learning_rate.value))) {
    throw ContractError("train config: learning rate must be finite and >= 0");
  }
  augmentation.validate();
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"learning_rate", learning_rate.str()},
          {"batch_size", batch_size},
          {"momentum", momentum},
          {"augmentation",
           {{"max_shift_fraction", augmentation.max_shift_fraction},
            {"max_rotation", augmentation.max_rotation},
            {"horizontal_flip", augmentation.horizontal_flip},
            {"fill", augmentation.fill}}},
          {"seed", seed},
          {"train_subset", train_subset}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  if (j.contains("learning_rate")) {
    const auto& lr = j.at("learning_rate");
    c.learning_rate = lr.is_string() ? LearningRate::parse(lr.get<std::string>()) : LearningRate{lr.get<double>(), false};
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.momentum = j.value("momentum", c.momentum);
  if (j.contains("augmentation")) {
    const auto& a = j.at("augmentation");
    c.augmentation.max_shift_fraction = a.value("max_shift_fraction", 0.0);
    c.augmentation.max_rotation = a.value("max_rotation", 0.0);
    c.augmentation.horizontal_flip = a.value("horizontal_flip", false);
    c.augmentation.fill = a.value("fill", std::vector<float>{0.0f});
  }
  c.seed = j.value("seed", c.seed);
  c.train_subset = j.value("train_subset", c.train_subset);
  return c;
}

std::string TrainConfig::hash() const { return hex64(fnv1a(to_json().dump())); }

nlohmann::json RunRecord::to_json() const {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : epochs) {
    ep.push_back({{"train_loss", e.train_loss},
                  {"train_accuracy", e.train_accuracy},
                  {"test_loss", e.test_loss},
                  {"test_accuracy", e.test_accuracy}});
  }
  return {{"experiment_id", experiment_id},
          {"phase", phase},
          {"model_spec", model_spec},
          {"task", task},
          {"epochs", ep},
          {"best_test_accuracy", best_test_accuracy},
          {"best_epoch", best_epoch},
          {"final_test_accuracy", final_test_accuracy},
          {"wall_seconds", wall_seconds},
          {"seed", seed},
          {"config_hash", config_hash},
          {"error", error},
          {"extra", extra}};
}

RunRecord RunRecord::from_json(const nlohmann::json& j) {
  RunRecord r;
  r.experiment_id = j.value("experiment_id", "");
  r.phase = j.value("phase", "");
  r.model_spec = j.value("model_spec", nlohmann::json());
  r.task = j.value("task", "");
  for (const auto& e : j.value("epochs", nlohmann::json::array())) {
    r.epochs.push_back({e.at("train_loss"), e.at("train_accuracy"), e.at("test_loss"), e.at("test_accuracy")});
  }
  r.best_test_accuracy = j.value("best_test_accuracy", 0.0);
  r.best_epoch = j.value("best_epoch", std::size_t{0});
  r.final_test_accuracy = j.value("final_test_accuracy", 0.0);
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.seed = j.value("seed", std::uint64_t{0});
  r.config_hash = j.value("config_hash", "");
  r.error = j.value("error", "");
  r.extra = j.value("extra", nlohmann::json::object());
  return r;
}

void RunRecord::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << to_json().dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Accumulates cross-entropy and top-1 hits of a logits batch; ties go to the lower class.
void score(const Tensor<float>& logits, std::span<const std::int32_t> labels, double& loss_sum, std::size_t& correct) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = logits.data() + i * k;
    std::size_t arg = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (row[c] > row[arg]) arg = c;
    }
    double z = 0;
    for (std::size_t c = 0; c < k; ++c) z += std::exp(static_cast<double>(row[c]) - row[arg]);
    loss_sum += std::log(z) - (static_cast<double>(row[labels[i]]) - row[arg]);
    if (static_cast<std::int32_t>(arg) == labels[i]) ++correct;
  }
}

Tensor<float> gather_rows(const Tensor<float>& src, std::span<const std::size_t> rows) {
  Shape shape = src.shape();
  const std::size_t stride = src.numel() / shape[0];
  shape[0] = rows.size();
  Tensor<float> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  return out;
}

std::vector<std::int32_t> gather_labels(std::span<const std::int32_t> labels, std::span<const std::size_t> rows) {
  std::vector<std::int32_t> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
  return out;
}

void check_splits(const data::LabeledDataset& train_set, const data::LabeledDataset& test_set) {
  if (train_set.split != data::Split::kTrain || test_set.split != data::Split::kTest) {
    throw ContractError("expected a train split and a test split, got " + data::split_name(train_set.split) + " and " +
                        data::split_name(test_set.split));
  }
  if (train_set.size() == 0 || test_set.size() == 0) throw ContractError("empty train or test split");
  if (train_set.content_hash() == test_set.content_hash()) {
    throw ContractError("train and test splits have identical content");
  }
}

void check_label_sets(const data::LabelSet& train_labels, const data::LabelSet& test_labels) {
  if (train_labels.classes != test_labels.classes) {
    throw ContractError("label scheme mismatch: train has " + std::to_string(train_labels.classes) +
                        " classes, test has " + std::to_string(test_labels.classes));
  }
}

std::vector<std::size_t> training_rows(std::size_t n, const TrainConfig& config) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  if (config.train_subset != 0 && config.train_subset < n) {
    Rng rng(derive_seed({config.seed, 0x737562736574}));
    rng.shuffle(rows.begin(), rows.end());
    rows.resize(config.train_subset);
    std::sort(rows.begin(), rows.end());
  }
  return rows;
}

template <typename Fn>
void diverge_guard(std::size_t epoch, std::size_t batch, Fn&& step) {
  try {
    step();
  } catch (const NumericError& e) {
    throw NumericError("training diverged at epoch " + std::to_string(epoch + 1) + ", batch " +
                       std::to_string(batch + 1) + ": " + e.what());
  }
}

void finish_record(RunRecord& r) {
  r.best_test_accuracy = 0;
  r.best_epoch = 0;
  for (std::size_t e = 0; e < r.epochs.size(); ++e) {
    if (r.best_epoch == 0 || r.epochs[e].test_accuracy > r.best_test_accuracy) {
      r.best_test_accuracy = r.epochs[e].test_accuracy;
      r.best_epoch = e + 1;
    }
  }
  r.final_test_accuracy = r.epochs.empty() ? 0 : r.epochs.back().test_accuracy;
}

}  // namespace

Evaluation evaluate(const model::ModelParams& params, const Tensor<float>& images, std::span<const std::int32_t> labels,
                    std::size_t batch_size) {
  const std::size_t n = images.dim(0);
  if (labels.size() != n) throw DimensionError("evaluate: label count does not match image count");
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  std::vector<double> loss(batches, 0.0);
  std::vector<std::size_t> hits(batches, 0);
  parallel_for(batches, 1, [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t b = begin; b < end; ++b) {
      std::vector<std::size_t> rows;
      for (std::size_t i = b * batch_size; i < std::min(n, (b + 1) * batch_size); ++i) rows.push_back(i);
      const auto logits = model::forward_to(params, Var<float>::constant(gather_rows(images, rows)), "logits");
      score(logits.value(), labels.subspan(rows.front(), rows.size()), loss[b], hits[b]);
    }
  });
  Evaluation e;
  e.correct = std::accumulate(hits.begin(), hits.end(), std::size_t{0});
  e.loss = std::accumulate(loss.begin(), loss.end(), 0.0) / static_cast<double>(n);
  e.accuracy = static_cast<double>(e.correct) / static_cast<double>(n);
  return e;
}

TrainResult train(const model::ModelSpec& spec, const data::LabeledDataset& train_set,
                  const data::LabeledDataset& test_set, data::LabelScheme scheme, const TrainConfig& config,
                  std::string_view experiment_id, const std::filesystem::path& checkpoint_dir) {
  config.validate();
  check_splits(train_set, test_set);
  const auto& ytr = train_set.labels(scheme);
  const auto& yte = test_set.labels(scheme);
  check_label_sets(ytr, yte);
  if (ytr.classes != spec.classes) {
    throw ContractError("labels '" + data::scheme_name(scheme) + "' have " + std::to_string(ytr.classes) +
                        " classes but the model outputs " + std::to_string(spec.classes));
  }
  const auto t0 = Clock::now();

  TrainResult out;
  auto params = model::build_model(spec, derive_seed({config.seed, 0x696e6974}));
  auto leaves = params.parameters();
  auto opt = OptimizerState<float>::sgd_momentum(config.learning_rate.resolve(spec.penultimate_width()), config.momentum);
  Rng shuffle_rng(derive_seed({config.seed, 0x73687566}));
  Rng augment_rng(derive_seed({config.seed, 0x61756700}));
  auto order = training_rows(train_set.size(), config);

  RunRecord& rec = out.record;
  rec.experiment_id = std::string(experiment_id);
  rec.phase = "original";
  rec.model_spec = spec.to_json();
  rec.task = data::scheme_name(scheme);
  rec.seed = config.seed;
  rec.config_hash = config.hash();
  rec.extra["train_size"] = order.size();
  rec.extra["train_hash"] = hex64(train_set.content_hash());
  rec.extra["test_hash"] = hex64(test_set.content_hash());

  double best = -1;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t hits = 0;
    const std::size_t batches = (order.size() + config.batch_size - 1) / config.batch_size;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::span<const std::size_t> rows(order.data() + b * config.batch_size,
                                              std::min(config.batch_size, order.size() - b * config.batch_size));
      auto x = gather_rows(train_set.images, rows);
      if (!config.augmentation.is_identity()) x = data::augment_batch(x, config.augmentation, augment_rng);
      const auto y = gather_labels(ytr.values, rows);
      diverge_guard(epoch, b, [&] {
        const auto logits = model::forward_to(params, Var<float>::leaf(std::move(x), false), "logits");
        const auto loss = ops::softmax_cross_entropy(logits, std::span<const std::int32_t>(y));
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) throw NumericError("non-finite loss");
        double unused = 0;
        score(logits.value(), y, unused, hits);
        loss_sum += lv * static_cast<double>(rows.size());
        optimizer_step(opt, leaves, backward(loss));
      });
    }
    const auto ev = evaluate(params, test_set.images, yte.values);
    rec.epochs.push_back({loss_sum / order.size(), static_cast<double>(hits) / order.size(), ev.loss, ev.accuracy});
    if (config.on_epoch) config.on_epoch(epoch + 1, rec.epochs.back());
    if (ev.accuracy > best) {
      best = ev.accuracy;
      out.best_params = model::frozen_copy(params);
    }
  }
  finish_record(rec);
  out.final_params = std::move(params);
  rec.wall_seconds = seconds_since(t0);
  if (!checkpoint_dir.empty()) {
    std::filesystem::create_directories(checkpoint_dir);
    model::save_checkpoint(checkpoint_dir / "final.ckpt", out.final_params, rec.config_hash);
    model::save_checkpoint(checkpoint_dir / "best.ckpt", out.best_params, rec.config_hash);
  }
  return out;
}

LinearHead init_head(std::size_t n, std::size_t classes, std::uint64_t seed) {
  if (n == 0 || classes == 0) throw ContractError("init_head: empty head");
  Rng rng(seed);
  LinearHead h{Tensor<float>({n, classes}), Tensor<float>({classes})};
  const double sd = 1.0 / std::sqrt(static_cast<double>(n));
  for (auto& w : h.weight.storage()) w = static_cast<float>(sd * rng.normal());
  return h;
}

Tensor<float> penultimate_features(const model::ModelParams& params, const Tensor<float>& images,
                                   std::size_t batch_size) {
  const std::size_t n = images.dim(0);
  const std::size_t width = params.spec.penultimate_width();
  Tensor<float> out({n, width});
  const std::size_t batches = (n + batch_size - 1) / batch_size;
  parallel_for(batches, 1, [&](std::size_t begin, std::size_t end) {
    NoGradGuard guard;
    for (std::size_t b = begin; b < end; ++b) {
      std::vector<std::size_t> rows;
      for (std::size_t i = b * batch_size; i < std::min(n, (b + 1) * batch_size); ++i) rows.push_back(i);
      const auto h = model::forward_to(params, Var<float>::constant(gather_rows(images, rows)), "fc-penultimate");
      std::copy_n(h.value().data(), rows.size() * width, out.data() + rows.front() * width);
    }
  });
  return out;
}

GradientReach check_gradient_reach(const model::ModelParams& frozen, const LinearHead& head,
                                   const Tensor<float>& images, std::span<const std::int32_t> labels) {
  const auto net = model::frozen_copy(frozen);
  auto w = Var<float>::leaf(head.weight);
  auto b = Var<float>::leaf(head.bias);
  const auto h = model::forward_to(net, Var<float>::constant(images), "fc-penultimate");
  const auto loss = ops::softmax_cross_entropy(ops::add(ops::matmul(h, w), b), labels);
  const auto grads = backward(loss);
  GradientReach r;
  for (const auto& p : net.parameters()) r.frozen_reached += grads.reached(p) ? 1 : 0;
  r.head_parameters = 2;
  r.head_reached = (grads.reached(w) ? 1 : 0) + (grads.reached(b) ? 1 : 0);
  return r;
}

namespace {

Tensor<float> head_logits(const LinearHead& head, const Tensor<float>& x) {
  NoGradGuard guard;
  return ops::add(ops::matmul(Var<float>::constant(x), Var<float>::constant(head.weight)),
                  Var<float>::constant(head.bias))
      .value();
}

Evaluation evaluate_head(const LinearHead& head, const Tensor<float>& x, std::span<const std::int32_t> labels) {
  Evaluation e;
  const std::size_t n = x.dim(0), chunk = 2048;
  double loss = 0;
  for (std::size_t s = 0; s < n; s += chunk) {
    std::vector<std::size_t> rows;
    for (std::size_t i = s; i < std::min(n, s + chunk); ++i) rows.push_back(i);
    score(head_logits(head, gather_rows(x, rows)), labels.subspan(s, rows.size()), loss, e.correct);
  }
  e.loss = loss / static_cast<double>(n);
  e.accuracy = static_cast<double>(e.correct) / static_cast<double>(n);
  return e;
}

// SGD-momentum on a linear classifier over fixed features; fills rec.epochs.
LinearHead fit_linear(const Tensor<float>& xtr, std::span<const std::int32_t> ytr, const Tensor<float>& xte,
                      std::span<const std::int32_t> yte, std::size_t classes, const TrainConfig& config,
                      RunRecord& rec) {
  const std::size_t n = xtr.dim(1);
  LinearHead head = init_head(n, classes, derive_seed({config.seed, 0x68656164}));
  auto w = Var<float>::leaf(head.weight);
  auto b = Var<float>::leaf(head.bias);
  std::vector<Var<float>> leaves{w, b};
  auto opt = OptimizerState<float>::sgd_momentum(config.learning_rate.resolve(n), config.momentum);
  Rng shuffle_rng(derive_seed({config.seed, 0x73687566}));
  auto order = training_rows(xtr.dim(0), config);
  LinearHead best_head = head;
  double best = -1;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0;
    std::size_t hits = 0;
    const std::size_t batches = (order.size() + config.batch_size - 1) / config.batch_size;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::span<const std::size_t> rows(order.data() + bi * config.batch_size,
                                              std::min(config.batch_size, order.size() - bi * config.batch_size));
      const auto y = gather_labels(ytr, rows);
      diverge_guard(epoch, bi, [&] {
        const auto logits = ops::add(ops::matmul(Var<float>::constant(gather_rows(xtr, rows)), w), b);
        const auto loss = ops::softmax_cross_entropy(logits, std::span<const std::int32_t>(y));
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) throw NumericError("non-finite loss");
        double unused = 0;
        score(logits.value(), y, unused, hits);
        loss_sum += lv * static_cast<double>(rows.size());
        optimizer_step(opt, leaves, backward(loss));
      });
    }
    head.weight = w.value();
    head.bias = b.value();
    const auto ev = evaluate_head(head, xte, yte);
    rec.epochs.push_back({loss_sum / order.size(), static_cast<double>(hits) / order.size(), ev.loss, ev.accuracy});
    if (config.on_epoch) config.on_epoch(epoch + 1, rec.epochs.back());
    if (ev.accuracy > best) {
      best = ev.accuracy;
      best_head = head;
    }
  }
  finish_record(rec);
  return best_head;
}

}  // namespace

FinetuneResult finetune_head(const model::ModelParams& frozen, const data::LabeledDataset& train_set,
                             const data::LabeledDataset& test_set, data::LabelScheme scheme, const TrainConfig& config,
                             std::string_view experiment_id) {
  config.validate();
  check_splits(train_set, test_set);
  const auto& ytr = train_set.labels(scheme);
  const auto& yte = test_set.labels(scheme);
  check_label_sets(ytr, yte);
  const auto t0 = Clock::now();
  const auto before = model::params_checksum(frozen);

  FinetuneResult out;
  RunRecord& rec = out.record;
  rec.experiment_id = std::string(experiment_id);
  rec.phase = "finetune";
  rec.model_spec = frozen.spec.to_json();
  rec.task = data::scheme_name(scheme);
  rec.seed = config.seed;
  rec.config_hash = config.hash();

  const std::size_t probe = std::min<std::size_t>(train_set.size(), 8);
  std::vector<std::size_t> probe_rows(probe);
  std::iota(probe_rows.begin(), probe_rows.end(), 0);
  const auto reach =
      check_gradient_reach(frozen, init_head(frozen.spec.penultimate_width(), ytr.classes, 0),
                           gather_rows(train_set.images, probe_rows), gather_labels(ytr.values, probe_rows));
  if (!reach.ok()) {
    throw ContractError("fine-tuning would update " + std::to_string(reach.frozen_reached) + " frozen parameters");
  }

  const auto xtr = penultimate_features(frozen, train_set.images);
  const auto xte = penultimate_features(frozen, test_set.images);
  out.head = fit_linear(xtr, ytr.values, xte, yte.values, ytr.classes, config, rec);

  const auto after = model::params_checksum(frozen);
  if (after != before) throw ContractError("frozen parameters changed during fine-tuning");
  rec.extra["frozen_checksum_before"] = hex64(before);
  rec.extra["frozen_checksum_after"] = hex64(after);
  rec.extra["gradient_reach"] = {{"frozen", reach.frozen_reached}, {"head", reach.head_reached}};
  rec.extra["feature_width"] = xtr.dim(1);
  rec.wall_seconds = seconds_since(t0);
  return out;
}

RunRecord linear_baseline(const data::LabeledDataset& train_set, const data::LabeledDataset& test_set,
                          data::LabelScheme scheme, const TrainConfig& config, std::string_view experiment_id) {
  config.validate();
  check_splits(train_set, test_set);
  const auto& ytr = train_set.labels(scheme);
  const auto& yte = test_set.labels(scheme);
  check_label_sets(ytr, yte);
  const auto t0 = Clock::now();
  RunRecord rec;
  rec.experiment_id = std::string(experiment_id);
  rec.phase = "baseline";
  rec.model_spec = {{"kind", "linear"}};
  rec.task = data::scheme_name(scheme);
  rec.seed = config.seed;
  rec.config_hash = config.hash();
  const std::size_t d = train_set.images.numel() / train_set.size();
  fit_linear(train_set.images.reshaped({train_set.size(), d}), ytr.values,
             test_set.images.reshaped({test_set.size(), d}), yte.values, ytr.classes, config, rec);
  rec.extra["input_dim"] = d;
  rec.wall_seconds = seconds_since(t0);
  return rec;
}

void ScanSpec::validate() const {
  if (points.empty()) throw ContractError("scan: no points");
  if (seeds < 1) throw ContractError("scan: seeds must be >= 1");
  original_config.validate();
  finetune_config.validate();
}

std::uint64_t scan_seed(std::string_view experiment_id, std::size_t point, std::size_t replicate) {
  return derive_seed({fnv1a(experiment_id), point, replicate});
}

std::size_t point_width(const model::ModelSpec& spec) { return spec.penultimate_width(); }

std::size_t point_depth(const model::ModelSpec& spec) {
  return spec.kind == model::ModelKind::kMlp ? spec.hidden_widths.size() : 1;
}

ScanResult run_scan(const ScanSpec& scan, const data::LabeledDataset& train_set, const data::LabeledDataset& test_set,
                    const std::filesystem::path& results_dir) {
  scan.validate();
  const std::size_t runs = scan.points.size() * scan.seeds;
  ScanResult out;
  out.records.resize(2 * runs);
  parallel_for(runs, 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t p = i / scan.seeds, r = i % scan.seeds;
      const auto seed = scan_seed(scan.experiment_id, p, r);
      auto& orig = out.records[2 * i];
      auto& tuned = out.records[2 * i + 1];
      for (auto* rec : {&orig, &tuned}) {
        rec->experiment_id = scan.experiment_id;
        rec->model_spec = scan.points[p].to_json();
        rec->seed = seed;
      }
      orig.phase = "original";
      orig.task = data::scheme_name(scan.original);
      tuned.phase = "finetune";
      tuned.task = data::scheme_name(scan.target);
      try {
        auto oc = scan.original_config;
        oc.seed = seed;
        auto trained = train(scan.points[p], train_set, test_set, scan.original, oc, scan.experiment_id);
        orig = std::move(trained.record);
        auto fc = scan.finetune_config;
        fc.seed = seed;
        tuned = finetune_head(trained.final_params, train_set, test_set, scan.target, fc, scan.experiment_id).record;
      } catch (const std::exception& e) {
        (orig.epochs.empty() ? orig : tuned).error = e.what();
        if (!orig.error.empty()) tuned.error = "original run failed";
      }
      for (auto* rec : {&orig, &tuned}) {
        rec->extra["point"] = p;
        rec->extra["replicate"] = r;
        if (!results_dir.empty()) {
          rec->save(results_dir / (scan.experiment_id + "_p" + std::to_string(p) + "_r" + std::to_string(r) + "_" +
                                   rec->phase + ".json"));
        }
      }
    }
  });
  out.table = aggregate(scan, out.records);
  return out;
}

std::vector<AggregateRow> aggregate(const ScanSpec& scan, std::span<const RunRecord> records) {
  std::vector<AggregateRow> table;
  for (std::size_t p = 0; p < scan.points.size(); ++p) {
    for (const auto& [task, phase] : {std::pair{"original", "original"}, std::pair{"new", "finetune"}}) {
      std::vector<double> acc;
      for (const auto& r : records) {
        if (r.phase == phase && r.error.empty() && r.extra.value("point", std::size_t{SIZE_MAX}) == p) {
          acc.push_back(r.best_test_accuracy);
        }
      }
      AggregateRow row;
      row.width = point_width(scan.points[p]);
      row.depth = point_depth(scan.points[p]);
      row.params = model::param_count(scan.points[p]);
      row.task = task;
      row.n_seeds = acc.size();
      if (!acc.empty()) {
        row.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / acc.size();
        double ss = 0;
        for (double a : acc) ss += (a - row.mean) * (a - row.mean);
        row.std = acc.size() > 1 ? std::sqrt(ss / (acc.size() - 1)) : 0.0;
      }
      table.push_back(row);
    }
  }
  return table;
}

void write_aggregate_csv(const std::filesystem::path& path, std::span<const AggregateRow> table) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "width,depth,params,task,mean,std,n-seeds\n";
  for (const auto& r : table) {
    out << r.width << ',' << r.depth << ',' << r.params << ',' << r.task << ',' << r.mean << ',' << r.std << ','
        << r.n_seeds << '\n';
  }
}

std::vector<AggregateRow> read_aggregate_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "width,depth,params,task,mean,std,n-seeds") throw FormatError(path.string() + ": unexpected header", 0);
  std::vector<AggregateRow> rows;
  std::size_t lineno = 1, offset = line.size() + 1;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t at = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected 7 fields", at);
    try {
      rows.push_back({std::stoull(f[0]), std::stoull(f[1]), std::stoull(f[2]), f[3], std::stod(f[4]), std::stod(f[5]),
                      std::stoull(f[6])});
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": malformed number", at);
    }
  }
  return rows;
}

std::vector<double> lr_grid(std::size_t points) {
  if (points == 0) throw ContractError("lr_grid: need at least one point");
  std::vector<double> out;
  for (std::size_t i = 0; i < points; ++i) {
    const double x = points == 1 ? -1.0 : -1.0 - 2.0 * static_cast<double>(i) / static_cast<double>(points - 1);
    out.push_back(std::pow(10.0, x));
  }
  return out;
}

LrScanResult lr_scan(std::span<const double> learning_rates,
                     const std::function<std::vector<RunRecord>(double)>& experiment) {
  if (learning_rates.empty()) throw ContractError("lr_scan: empty grid");
  LrScanResult out;
  double best = -1;
  for (double lr : learning_rates) {
    auto recs = experiment(lr);
    double sum = 0;
    std::size_t n = 0;
    for (auto& r : recs) {
      r.extra["learning_rate"] = lr;
      if (r.error.empty()) {
        sum += r.best_test_accuracy;
        ++n;
      }
      out.records.push_back(std::move(r));
    }
    const double mean = n ? sum / n : 0.0;
    out.mean_best_accuracy.push_back(mean);
    if (mean > best) {
      best = mean;
      out.best_learning_rate = lr;
    }
  }
  return out;
}

}  // namespace atlasbench::transfer
