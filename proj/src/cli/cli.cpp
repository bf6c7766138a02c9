#include "atlasbench/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "atlasbench/atlas.hpp"
#include "atlasbench/embedding.hpp"
#include "atlasbench/render.hpp"
#include "atlasbench/transfer.hpp"
#include "atlasbench/viz.hpp"

#ifndef ATLASBENCH_VERSION
#define ATLASBENCH_VERSION "0.0.0-unknown"
#endif

namespace atlasbench::cli {

namespace fs = std::filesystem;
using data::LabelScheme;
using json = nlohmann::json;

std::string version() { return ATLASBENCH_VERSION; }

namespace {

/// Bad flag values found after parsing; reported like parse errors.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, sep);) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::size_t parse_size(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size() && v >= 0) return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
  }
  throw UsageError(flag + ": '" + s + "' is not a non-negative integer");
}

std::vector<std::size_t> parse_sizes(const std::string& s, const std::string& flag) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) out.push_back(parse_size(item, flag));
  return out;
}

/// Options that do not change what a command computes.
bool hash_excluded(const std::string& name) {
  return name == "--help" || name == "--config" || name == "--dump-config" || name == "--out";
}

/// FNV-1a over the resolved value of every option, in declaration order.
std::string config_hash(const CLI::App& app) {
  std::string canon;
  for (const CLI::Option* opt : app.get_options()) {
    const std::string name = opt->get_name();
    if (hash_excluded(name)) continue;
    std::string value;
    if (opt->get_type_size() == 0) {
      value = opt->count() ? (opt->as<bool>() ? "true" : "false") : "false";
    } else if (opt->count()) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    canon += name + "=" + value + "\n";
  }
  return hex64(fnv1a(canon));
}

/// Flag values shared by every subcommand.
struct Common {
  std::string out;
  bool dump = false;
  std::string data_root = "data";
};

struct Dataset {
  std::string name;
  std::uint64_t seed = 0;
};

/// Named datasets resolve against the data root; a directory written by
/// gen-data (train.ds, test.ds) is loaded directly.
data::DatasetPair load_pair(const Dataset& d, const fs::path& root) {
  const fs::path as_dir(d.name);
  if (fs::exists(as_dir / "train.ds") && fs::exists(as_dir / "test.ds")) {
    return {data::load_dataset(as_dir / "train.ds"), data::load_dataset(as_dir / "test.ds")};
  }
  if (d.name == "mnist") return data::load_mnist(root / "mnist");
  if (d.name == "translated-mnist") {
    const auto base = data::load_mnist(root / "mnist");
    return {data::make_translated_mnist(base.train, d.seed), data::make_translated_test(base.test, d.seed)};
  }
  if (d.name == "cifar10") return data::load_cifar(root / "cifar10", data::CifarVariant::kCifar10);
  if (d.name == "cifar100") return data::load_cifar(root / "cifar100", data::CifarVariant::kCifar100);
  if (d.name == "cifar100-subset") {
    return data::cifar100_coarse_subset(data::load_cifar(root / "cifar100", data::CifarVariant::kCifar100));
  }
  throw std::runtime_error("unknown dataset '" + d.name +
                           "' (expected mnist, translated-mnist, cifar10, cifar100, cifar100-subset or a gen-data "
                           "directory)");
}

void add_dataset(CLI::App* sub, Dataset& d, bool required = true) {
  auto* o = sub->add_option("--dataset", d.name, "mnist, translated-mnist, cifar10, cifar100, cifar100-subset or a gen-data directory");
  if (required) o->required();
  sub->add_option("--dataset-seed", d.seed, "seed for derived datasets (translated-mnist base selection)");
}

struct TrainFlags {
  std::size_t epochs = 10;
  std::string lr = "0.01";
  std::size_t batch = 128;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  std::size_t subset = 0;
  std::string augment = "none";
};

void add_train_flags(CLI::App* sub, TrainFlags& t, const std::string& prefix = "") {
  sub->add_option("--" + prefix + "epochs", t.epochs, "training epochs");
  sub->add_option("--" + prefix + "lr", t.lr, "learning rate, a number or 1/n");
  sub->add_option("--" + prefix + "batch", t.batch, "minibatch size");
  sub->add_option("--" + prefix + "momentum", t.momentum, "SGD momentum");
  sub->add_option("--" + prefix + "seed", t.seed, "run seed");
  sub->add_option("--" + prefix + "subset", t.subset, "train on this many rows (0 = all)");
  sub->add_option("--" + prefix + "augment", t.augment, "none or cifar10")->check(CLI::IsMember({"none", "cifar10"}));
}

transfer::TrainConfig train_config(const TrainFlags& t, const data::LabeledDataset& train_set, std::ostream& err,
                                   const std::string& tag) {
  transfer::TrainConfig c;
  c.epochs = t.epochs;
  try {
    c.learning_rate = transfer::LearningRate::parse(t.lr);
  } catch (const std::exception& e) {
    throw UsageError("--lr: " + std::string(e.what()));
  }
  c.batch_size = t.batch;
  c.momentum = t.momentum;
  c.seed = t.seed;
  c.train_subset = t.subset;
  if (t.augment == "cifar10") c.augmentation = data::AugmentationPolicy::cifar10(data::channel_means(train_set));
  c.on_epoch = [&err, tag](std::size_t epoch, const transfer::EpochStats& s) {
    err << tag << " epoch " << epoch << ": train loss " << s.train_loss << ", train acc " << s.train_accuracy
        << ", test acc " << s.test_accuracy << "\n";
  };
  return c;
}

struct ModelFlags {
  std::string arch = "mlp";
  std::string hidden = "2000";
  std::string conv = "32,32";
  std::size_t penultimate = 2048;
};

void add_model_flags(CLI::App* sub, ModelFlags& m) {
  sub->add_option("--arch", m.arch, "mlp or cnn")->check(CLI::IsMember({"mlp", "cnn"}));
  sub->add_option("--hidden", m.hidden, "mlp hidden widths, comma separated");
  sub->add_option("--conv", m.conv, "cnn filters per block (a,b) or 'scaled'");
  sub->add_option("--penultimate", m.penultimate, "cnn fc-penultimate width");
}

model::ModelSpec model_spec(const ModelFlags& m, const data::LabeledDataset& ds, std::size_t classes) {
  if (m.arch == "mlp") {
    const auto widths = parse_sizes(m.hidden, "--hidden");
    if (widths.empty()) throw UsageError("--hidden: at least one width is needed");
    return model::ModelSpec::mlp(ds.channels(), ds.height(), ds.width(), widths, classes);
  }
  model::ConvPlan plan;
  if (m.conv == "scaled") {
    plan = model::scale_cnn_filters(m.penultimate);
  } else {
    const auto f = parse_sizes(m.conv, "--conv");
    if (f.size() != 2) throw UsageError("--conv: expected two filter counts or 'scaled'");
    plan = {f[0], f[1]};
  }
  return model::ModelSpec::cnn(ds.channels(), ds.height(), ds.width(), plan, m.penultimate, classes);
}

LabelScheme parse_task(const std::string& s, const std::string& flag) {
  try {
    return data::parse_scheme(s);
  } catch (const std::exception& e) {
    throw UsageError(flag + ": " + e.what());
  }
}

struct VizFlags {
  std::size_t steps = 512;
  double lr = 0.05;
  int jitter = 2;
  double scale_min = 0.95;
  double scale_max = 1.05;
  double rotation_deg = 5.0;
  std::string parameterization = "pixel";
  std::string mode = "cosine-power";
  std::uint64_t seed = 0;
};

void add_viz_flags(CLI::App* sub, VizFlags& v) {
  sub->add_option("--steps", v.steps, "feature-visualization steps per target (0 skips rendering)");
  sub->add_option("--viz-lr", v.lr, "Adam learning rate for the input");
  sub->add_option("--jitter", v.jitter, "jitter range in pixels");
  sub->add_option("--scale-min", v.scale_min, "smallest random scale");
  sub->add_option("--scale-max", v.scale_max, "largest random scale");
  sub->add_option("--rotation-deg", v.rotation_deg, "rotation range in degrees (+/-)");
  sub->add_option("--parameterization", v.parameterization, "pixel or fourier")
      ->check(CLI::IsMember({"pixel", "fourier"}));
  sub->add_option("--objective", v.mode, "cosine-power or angle-power (alias paper-literal)")
      ->check(CLI::IsMember({"cosine-power", "angle-power", "paper-literal"}));
  sub->add_option("--viz-seed", v.seed, "seed for initial images and transforms");
}

viz::VizConfig viz_config(const VizFlags& v) {
  viz::VizConfig c;
  c.steps = v.steps;
  c.learning_rate = v.lr;
  c.jitter_px = v.jitter;
  c.scale_min = v.scale_min;
  c.scale_max = v.scale_max;
  c.rotation = v.rotation_deg * std::numbers::pi / 180.0;
  c.parameterization = viz::parse_parameterization(v.parameterization);
  c.mode = viz::parse_mode(v.mode);
  c.seed = v.seed;
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  return c;
}

void write_json(const fs::path& p, const json& j) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << j.dump(2) << "\n";
  }
  fs::rename(tmp, p);
}

json outcomes_json(const std::vector<viz::RenderOutcome>& results) {
  json arr = json::array();
  for (const auto& r : results) {
    json j{{"index", r.index}};
    if (r.result) {
      j["initial_alignment"] = r.result->initial_alignment;
      j["final_alignment"] = r.result->final_alignment;
      j["final_objective"] = r.result->trace.empty() ? 0.0 : r.result->trace.back();
    } else {
      j["error"] = r.error;
    }
    arr.push_back(j);
  }
  return arr;
}

render::TileMosaic mosaic_for(const std::vector<viz::RenderOutcome>& results, std::size_t g) {
  std::vector<std::uint8_t> mask(g * g, 0);
  for (const auto& r : results) mask[r.index] = 1;
  return render::mosaic_from_results(g, mask, results);
}

struct Embedded {
  Tensor<float> coords;
  std::vector<std::int32_t> labels;
};

Embedded read_embedding_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "index,x,y,label") throw FormatError(path.string() + ": expected header index,x,y,label", 0);
  std::vector<float> xy;
  Embedded e;
  std::uint64_t offset = line.size() + 1;
  while (std::getline(is, line)) {
    const auto cols = split_list(line + ",");
    if (cols.size() < 3) throw FormatError(path.string() + ": malformed row '" + line + "'", offset);
    try {
      xy.push_back(std::stof(cols[1]));
      xy.push_back(std::stof(cols[2]));
      e.labels.push_back(cols.size() > 3 ? std::stoi(cols[3]) : 0);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'", offset);
    }
    offset += line.size() + 1;
  }
  const std::size_t n = xy.size() / 2;
  e.coords = Tensor<float>({n, 2}, std::move(xy));
  return e;
}

bool given(const std::vector<std::string>& args, std::size_t from, const std::string& flag) {
  for (std::size_t i = from; i < args.size(); ++i) {
    if (args[i] == flag || args[i].rfind(flag + "=", 0) == 0) return true;
  }
  return false;
}

/// Expands `--config FILE` after the subcommand into flags for every key not
/// already given on the command line. Unknown keys are usage errors.
std::vector<std::string> with_config_file(const CLI::App& app, const std::vector<std::string>& args) {
  std::size_t sub_at = 0;
  while (sub_at < args.size() && args[sub_at].rfind("-", 0) == 0) ++sub_at;
  if (sub_at == args.size()) return args;
  const CLI::App* sub = app.get_subcommand_no_throw(args[sub_at]);
  if (!sub) throw UsageError("unknown subcommand '" + args[sub_at] + "'");
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<long>(sub_at) + 1);
  std::string file;
  for (std::size_t i = sub_at + 1; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 == args.size()) throw UsageError("--config needs a file");
      file = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      out.push_back(args[i]);
    }
  }
  if (file.empty()) return out;
  if (!fs::exists(file)) throw UsageError("--config: file not found: " + file);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(file);
  } catch (const CLI::Error& e) {
    throw UsageError("--config: " + std::string(e.what()));
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    const std::string key = item.fullname();
    const std::string flag = "--" + key;
    const CLI::Option* opt = item.parents.empty() ? sub->get_option_no_throw(flag) : nullptr;
    if (!opt || !opt->get_configurable()) throw UsageError("--config: unknown key '" + key + "' in " + file);
    if (given(args, sub_at + 1, flag)) continue;
    if (item.inputs.size() != 1) throw UsageError("--config: key '" + key + "' needs exactly one value");
    out.push_back(flag + "=" + item.inputs.front());
  }
  return out;
}

/// Per-subcommand state; `run` executes after a successful parse.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::string> required;  // checked after parsing so --dump-config works alone
  std::function<json(const fs::path& out)> run;
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Width, transfer and activation-atlas experiments on small networks.", "atlasbench"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", version());

  Common common;
  std::vector<Command> commands;

  auto add = [&](const std::string& name, const std::string& desc) -> Command& {
    Command& c = commands.emplace_back();
    c.app = app.add_subcommand(name, desc);
    c.app->add_option("--config", "flat TOML config file; flags override its values")->configurable(false);
    c.app->add_option("--out", common.out, "output directory");
    c.app->add_flag("--dump-config", common.dump, "print the resolved config as TOML and exit")->configurable(false);
    c.app->add_option("--data-root", common.data_root, "dataset root (ATLASBENCH_DATA overrides the config file)");
    c.required.push_back("--out");
    return c;
  };

  fs::path data_root;  // resolved after parsing

  // gen-data
  std::string gen_name;
  std::uint64_t gen_seed = 0;
  {
    auto& c = add("gen-data", "materialize a dataset as train.ds and test.ds");
    c.app->add_option("name,--name", gen_name, "mnist, translated-mnist, cifar10, cifar100 or cifar100-subset")
        ->required();
    c.app->add_option("--seed", gen_seed, "seed for derived datasets");
    c.run = [&](const fs::path& dir) {
      const auto pair = load_pair({gen_name, gen_seed}, data_root);
      data::save_dataset(dir / "train.ds", pair.train);
      data::save_dataset(dir / "test.ds", pair.test);
      out << "wrote " << pair.train.size() << " train and " << pair.test.size() << " test images to " << dir.string()
          << "\n";
      return json{{"train_size", pair.train.size()}, {"test_size", pair.test.size()}};
    };
  }

  // train
  Dataset train_ds;
  TrainFlags train_flags;
  ModelFlags train_model;
  std::string train_task = "digit";
  {
    auto& c = add("train", "train a network from scratch");
    add_dataset(c.app, train_ds);
    add_model_flags(c.app, train_model);
    add_train_flags(c.app, train_flags);
    c.app->add_option("--task", train_task, "label scheme: digit, shift, cifar10-class, coarse or fine");
    c.run = [&](const fs::path& dir) {
      const auto task = parse_task(train_task, "--task");
      const auto pair = load_pair(train_ds, data_root);
      const auto spec = model_spec(train_model, pair.train, pair.train.labels(task).classes);
      const auto cfg = train_config(train_flags, pair.train, err, "train");
      const auto r = transfer::train(spec, pair.train, pair.test, task, cfg, "train", dir);
      r.record.save(dir / "record.json");
      out << "best test accuracy " << r.record.best_test_accuracy << " at epoch " << r.record.best_epoch << "\n";
      return json{{"best_test_accuracy", r.record.best_test_accuracy}};
    };
  }

  // finetune
  Dataset ft_ds;
  TrainFlags ft_flags;
  std::string ft_checkpoint, ft_task = "digit";
  {
    auto& c = add("finetune", "fit a fresh linear head on the frozen penultimate layer");
    c.app->add_option("--checkpoint", ft_checkpoint, "trained model checkpoint");
    add_dataset(c.app, ft_ds);
    add_train_flags(c.app, ft_flags);
    c.app->add_option("--task", ft_task, "label scheme of the new task");
    c.required.push_back("--checkpoint");
    c.run = [&](const fs::path& dir) {
      const auto task = parse_task(ft_task, "--task");
      const auto ckpt = model::load_checkpoint(ft_checkpoint);
      const auto pair = load_pair(ft_ds, data_root);
      const auto cfg = train_config(ft_flags, pair.train, err, "finetune");
      const auto r = transfer::finetune_head(ckpt.params, pair.train, pair.test, task, cfg, "finetune");
      r.record.save(dir / "record.json");
      out << "best test accuracy " << r.record.best_test_accuracy << "\n";
      return json{{"best_test_accuracy", r.record.best_test_accuracy}};
    };
  }

  // baseline
  Dataset base_ds;
  TrainFlags base_flags;
  std::string base_task = "digit";
  {
    auto& c = add("baseline", "linear classifier on raw pixels");
    add_dataset(c.app, base_ds);
    add_train_flags(c.app, base_flags);
    c.app->add_option("--task", base_task, "label scheme");
    c.run = [&](const fs::path& dir) {
      const auto task = parse_task(base_task, "--task");
      const auto pair = load_pair(base_ds, data_root);
      const auto cfg = train_config(base_flags, pair.train, err, "baseline");
      const auto r = transfer::linear_baseline(pair.train, pair.test, task, cfg, "baseline");
      r.save(dir / "record.json");
      out << "best test accuracy " << r.best_test_accuracy << "\n";
      return json{{"best_test_accuracy", r.best_test_accuracy}};
    };
  }

  // atlas
  Dataset atlas_ds;
  std::string atlas_checkpoint, atlas_layer = "fc-penultimate", atlas_split = "train", atlas_color = "digit";
  std::size_t atlas_grid = 15, atlas_samples = 5000, atlas_min_occ = 5, atlas_bins = 50;
  std::size_t emb_neighbors = 15, emb_epochs = 500;
  double emb_min_dist = 0.1;
  std::string emb_metric = "euclidean";
  std::uint64_t atlas_seed = 0;
  VizFlags atlas_viz;
  {
    auto& c = add("atlas", "activation atlas: embed activations, grid, whiten, visualize cells");
    c.app->add_option("--checkpoint", atlas_checkpoint, "trained model checkpoint");
    add_dataset(c.app, atlas_ds);
    c.app->add_option("--layer", atlas_layer, "tap to collect");
    c.app->add_option("--split", atlas_split, "train or test")->check(CLI::IsMember({"train", "test"}));
    c.app->add_option("--samples", atlas_samples, "inputs to embed, drawn by seeded shuffle (0 = all)");
    c.app->add_option("--grid", atlas_grid, "grid cells per side");
    c.app->add_option("--min-occupancy", atlas_min_occ, "points needed for a cell to be rendered");
    c.app->add_option("--bins", atlas_bins, "embedding histogram bins per side");
    c.app->add_option("--color-by", atlas_color, "label scheme used to color the embedding histogram");
    c.app->add_option("--neighbors", emb_neighbors, "embedding neighbor count");
    c.app->add_option("--min-dist", emb_min_dist, "embedding minimum distance");
    c.app->add_option("--layout-epochs", emb_epochs, "embedding layout epochs");
    c.app->add_option("--metric", emb_metric, "euclidean or cosine")->check(CLI::IsMember({"euclidean", "cosine"}));
    c.app->add_option("--seed", atlas_seed, "seed for sampling, spatial taps and the embedding");
    add_viz_flags(c.app, atlas_viz);
    c.required.push_back("--checkpoint");
    c.run = [&](const fs::path& dir) {
      const auto color_scheme = parse_task(atlas_color, "--color-by");
      const auto vcfg = viz_config(atlas_viz);
      if (atlas_grid == 0) throw UsageError("--grid: must be at least 1");
      const auto ckpt = model::load_checkpoint(atlas_checkpoint);
      const auto pair = load_pair(atlas_ds, data_root);
      const auto& full = atlas_split == "train" ? pair.train : pair.test;
      std::vector<std::size_t> rows(full.size());
      std::iota(rows.begin(), rows.end(), 0);
      if (atlas_samples > 0 && atlas_samples < rows.size()) {
        Rng rng(derive_seed({atlas_seed, 0x73616d70}));
        rng.shuffle(rows.begin(), rows.end());
        rows.resize(atlas_samples);
        std::sort(rows.begin(), rows.end());
      }
      const auto ds = full.subset(rows);
      const auto& labels = ds.labels(color_scheme).values;
      err << "atlas: collecting " << atlas_layer << " for " << ds.size() << " inputs\n";
      const auto acts = atlas::collect_activations(ckpt.params, atlas_layer, ds.images, labels,
                                                   atlas::SpatialMode::kRandom, atlas_seed);
      embedding::EmbeddingConfig ecfg;
      ecfg.n_neighbors = emb_neighbors;
      ecfg.min_dist = emb_min_dist;
      ecfg.layout_epochs = emb_epochs;
      ecfg.metric = embedding::parse_metric(emb_metric);
      ecfg.seed = atlas_seed;
      err << "atlas: embedding\n";
      const auto emb = embedding::embed(acts.vectors, ecfg);
      embedding::save_embedding_csv(dir / "embedding.csv", emb, labels);
      const std::size_t classes = ds.labels(color_scheme).classes;
      render::write_png(dir / "embedding.png", render::render_embedding(emb.coords, labels, classes, atlas_bins));

      const auto grid = atlas::average_and_whiten(acts, atlas::bin_to_grid(emb.coords, atlas_grid), atlas_min_occ);
      atlas::save_atlas(dir / "atlas.bin", grid);
      json summary{{"inputs", ds.size()}, {"occupied_cells", grid.occupied()}, {"grid", atlas_grid}};

      if (ds.has_labels(LabelScheme::kShift) && ds.has_labels(LabelScheme::kDigit)) {
        const auto& shift = ds.labels(LabelScheme::kShift);
        const auto corr = atlas::shift_angle_correlation(emb.coords, ds.labels(LabelScheme::kDigit).values,
                                                         shift.values, shift.classes);
        summary["shift_angle_correlation"] = corr;
      }
      if (vcfg.steps > 0) {
        err << "atlas: rendering " << grid.occupied() << " cells\n";
        const auto results = viz::render_targets(ckpt.params, viz::atlas_targets(grid), vcfg);
        render::write_png(dir / "mosaic.png", render::render_mosaic(mosaic_for(results, atlas_grid)));
        summary["cells"] = outcomes_json(results);
      }
      write_json(dir / "atlas.json", summary);
      out << "atlas: " << grid.occupied() << " of " << grid.cells() << " cells occupied\n";
      return json{{"occupied_cells", grid.occupied()}};
    };
  }

  // viz-neurons
  std::string vn_checkpoint, vn_layer = "fc-penultimate";
  std::size_t vn_count = 16;
  std::uint64_t vn_seed = 0;
  VizFlags vn_viz;
  {
    auto& c = add("viz-neurons", "feature visualizations of randomly chosen single neurons");
    c.app->add_option("--checkpoint", vn_checkpoint, "trained model checkpoint");
    c.app->add_option("--layer", vn_layer, "tap holding the neurons");
    c.app->add_option("--count", vn_count, "neurons to visualize");
    c.app->add_option("--seed", vn_seed, "seed for neuron selection");
    add_viz_flags(c.app, vn_viz);
    c.required.push_back("--checkpoint");
    c.run = [&](const fs::path& dir) {
      auto vcfg = viz_config(vn_viz);
      if (vcfg.steps == 0) throw UsageError("--steps: must be positive for viz-neurons");
      const auto ckpt = model::load_checkpoint(vn_checkpoint);
      if (!ckpt.params.has_tap(vn_layer)) throw UsageError("--layer: unknown tap '" + vn_layer + "'");
      const auto neurons = atlas::neuron_directions(ckpt.params.tap_width(vn_layer), vn_count, vn_seed);
      const auto targets = viz::neuron_targets(neurons, vn_layer);
      auto results = viz::render_targets(ckpt.params, targets, vcfg);
      json summary = outcomes_json(results);
      for (std::size_t i = 0; i < results.size(); ++i) {
        summary[i]["neuron"] = neurons[i].index;
        results[i].index = i;  // mosaic position
      }
      const auto g = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(results.size()))));
      render::write_png(dir / "neurons.png", render::render_mosaic(mosaic_for(results, std::max<std::size_t>(g, 1))));
      write_json(dir / "neurons.json", summary);
      out << "rendered " << results.size() << " neurons\n";
      return json{{"neurons", results.size()}};
    };
  }

  // scan
  Dataset scan_ds;
  TrainFlags scan_orig, scan_ft;
  std::string scan_points = "1x2000", scan_original = "shift", scan_new = "digit";
  std::size_t scan_seeds = 5, scan_max_width = 2000;
  bool scan_baseline = false;
  {
    auto& c = add("scan", "train on the original task, fine-tune on the new task, across widths and seeds");
    add_dataset(c.app, scan_ds);
    c.app->add_option("--points", scan_points,
                      "mlp points as DEPTHxWIDTH, or plan:DEPTH for the parameter-matched width");
    c.app->add_option("--max-width", scan_max_width, "single-layer width that plan:DEPTH matches");
    c.app->add_option("--original-task", scan_original, "label scheme of the original task");
    c.app->add_option("--new-task", scan_new, "label scheme of the new task");
    c.app->add_option("--seeds", scan_seeds, "seeds per point");
    add_train_flags(c.app, scan_orig);
    add_train_flags(c.app, scan_ft, "ft-");
    c.app->add_flag("--baseline", scan_baseline, "also train the raw-pixel linear baseline on the new task");
    c.run = [&](const fs::path& dir) {
      transfer::ScanSpec scan;
      scan.experiment_id = "scan";
      scan.original = parse_task(scan_original, "--original-task");
      scan.target = parse_task(scan_new, "--new-task");
      scan.seeds = scan_seeds;
      const auto pair = load_pair(scan_ds, data_root);
      const std::size_t classes = pair.train.labels(scan.original).classes;
      const auto& d = pair.train;
      for (const auto& token : split_list(scan_points)) {
        std::size_t depth = 0, width = 0;
        if (token.rfind("plan:", 0) == 0) {
          depth = parse_size(token.substr(5), "--points");
          if (depth == 0) throw UsageError("--points: depth must be at least 1");
          width = model::plan_width(depth, d.channels() * d.height() * d.width(), classes, scan_max_width).width;
        } else {
          const auto x = token.find('x');
          if (x == std::string::npos) throw UsageError("--points: '" + token + "' is not DEPTHxWIDTH or plan:DEPTH");
          depth = parse_size(token.substr(0, x), "--points");
          width = parse_size(token.substr(x + 1), "--points");
          if (depth == 0 || width == 0) throw UsageError("--points: depth and width must be positive");
        }
        scan.points.push_back(
            model::ModelSpec::mlp(d.channels(), d.height(), d.width(), std::vector<std::size_t>(depth, width), classes));
      }
      if (scan.points.empty()) throw UsageError("--points: no points given");
      scan.original_config = train_config(scan_orig, pair.train, err, "scan original");
      scan.finetune_config = train_config(scan_ft, pair.train, err, "scan finetune");
      scan.finetune_config.on_epoch = nullptr;
      const auto res = transfer::run_scan(scan, pair.train, pair.test, dir / "runs");
      transfer::write_aggregate_csv(dir / "aggregate.csv", res.table);
      std::optional<double> baseline;
      json summary{{"failed_runs", 0}};
      for (const auto& r : res.records) {
        if (!r.error.empty()) {
          summary["failed_runs"] = summary["failed_runs"].get<int>() + 1;
          err << "scan: " << r.experiment_id << " failed: " << r.error << "\n";
        }
      }
      if (scan_baseline) {
        auto bcfg = scan.finetune_config;
        const auto b = transfer::linear_baseline(pair.train, pair.test, scan.target, bcfg, "scan-baseline");
        b.save(dir / "baseline.json");
        baseline = b.best_test_accuracy;
        summary["baseline"] = *baseline;
      }
      render::write_png(dir / "scan.png", render::render_scan(res.table, baseline));
      write_json(dir / "scan.json", summary);
      for (const auto& row : res.table) {
        out << row.depth << "x" << row.width << " " << row.task << ": " << row.mean << " +/- " << row.std << " ("
            << row.n_seeds << " seeds)\n";
      }
      return summary;
    };
  }

  // lr-scan
  Dataset lr_ds;
  TrainFlags lr_flags;
  ModelFlags lr_model;
  std::string lr_task = "digit";
  std::size_t lr_points = 10, lr_seeds = 1;
  {
    auto& c = add("lr-scan", "train one architecture over a log-spaced learning-rate grid");
    add_dataset(c.app, lr_ds);
    add_model_flags(c.app, lr_model);
    add_train_flags(c.app, lr_flags);
    c.app->add_option("--task", lr_task, "label scheme");
    c.app->add_option("--points", lr_points, "grid points from 1e-1 down to 1e-3");
    c.app->add_option("--seeds", lr_seeds, "seeds per learning rate");
    c.run = [&](const fs::path& dir) {
      const auto task = parse_task(lr_task, "--task");
      if (lr_points == 0 || lr_seeds == 0) throw UsageError("--points and --seeds must be positive");
      const auto pair = load_pair(lr_ds, data_root);
      const auto spec = model_spec(lr_model, pair.train, pair.train.labels(task).classes);
      const auto base = train_config(lr_flags, pair.train, err, "lr-scan");
      const auto grid = transfer::lr_grid(lr_points);
      const auto res = transfer::lr_scan(grid, [&](double lr) {
        std::vector<transfer::RunRecord> recs;
        for (std::size_t s = 0; s < lr_seeds; ++s) {
          auto cfg = base;
          cfg.learning_rate = {lr, false};
          cfg.seed = derive_seed({lr_flags.seed, s});
          try {
            recs.push_back(transfer::train(spec, pair.train, pair.test, task, cfg, "lr-scan").record);
          } catch (const NumericError& e) {
            transfer::RunRecord r;
            r.experiment_id = "lr-scan";
            r.error = e.what();
            recs.push_back(r);
          }
        }
        return recs;
      });
      std::ofstream csv(dir / "lr_scan.csv");
      csv.precision(17);
      csv << "learning_rate,mean_best_accuracy\n";
      for (std::size_t i = 0; i < grid.size(); ++i) csv << grid[i] << "," << res.mean_best_accuracy[i] << "\n";
      out << "best learning rate " << res.best_learning_rate << "\n";
      return json{{"best_learning_rate", res.best_learning_rate}, {"learning_rates", grid},
                  {"mean_best_accuracy", res.mean_best_accuracy}};
    };
  }

  // render
  std::string render_kind = "scan", render_input;
  std::optional<double> render_baseline;
  std::string render_baseline_record;
  std::size_t render_bins = 50, render_classes = 0;
  {
    auto& c = add("render", "redraw a scan plot or an embedding histogram from saved tables");
    c.app->add_option("--kind", render_kind, "scan or embedding")->check(CLI::IsMember({"scan", "embedding"}));
    c.app->add_option("--input", render_input, "aggregate.csv (scan) or embedding.csv (embedding)");
    c.app->add_option("--baseline", render_baseline, "baseline accuracy for the dashed line");
    c.app->add_option("--baseline-record", render_baseline_record, "run record whose best accuracy is the baseline");
    c.app->add_option("--bins", render_bins, "histogram bins per side");
    c.app->add_option("--classes", render_classes, "class count (0 = largest label + 1)");
    c.required.push_back("--input");
    c.run = [&](const fs::path& dir) {
      if (render_kind == "scan") {
        const auto table = transfer::read_aggregate_csv(render_input);
        auto baseline = render_baseline;
        if (!render_baseline_record.empty()) {
          std::ifstream is(render_baseline_record);
          baseline = transfer::RunRecord::from_json(json::parse(is)).best_test_accuracy;
        }
        render::write_png(dir / "scan.png", render::render_scan(table, baseline));
        transfer::write_aggregate_csv(dir / "scan.csv", table);
        out << "scan plot of " << table.size() << " rows\n";
        return json{{"rows", table.size()}, {"baseline", baseline ? json(*baseline) : json()}};
      }
      if (render_bins == 0) throw UsageError("--bins: must be at least 1");
      const auto e = read_embedding_csv(render_input);
      std::size_t classes = render_classes;
      for (auto l : e.labels) classes = std::max(classes, static_cast<std::size_t>(std::max(l, 0) + 1));
      render::write_png(dir / "embedding.png", render::render_embedding(e.coords, e.labels, classes, render_bins));
      out << "embedding histogram of " << e.labels.size() << " points\n";
      return json{{"points", e.labels.size()}, {"classes", classes}};
    };
  }

  const std::string started = utc_now();
  Command* active = nullptr;
  auto usage = [&](const std::string& msg) {
    err << "error: " << msg << "\n\n" << (active ? active->app->help() : app.help());
    return kExitUsage;
  };
  std::vector<std::string> argv;
  try {
    argv = with_config_file(app, args);
  } catch (const UsageError& e) {
    return usage(e.what());
  }
  // CLI11 wants the arguments in reverse order.
  std::vector<std::string> reversed(argv.rbegin(), argv.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::Success& e) {
    // Also covers --help and --version.
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    for (auto& c : commands) {
      if (c.app->parsed()) active = &c;
    }
    return usage(e.what());
  }
  for (auto& c : commands) {
    if (c.app->parsed()) active = &c;
  }
  if (!active) return usage("a subcommand is required");

  const std::string hash = config_hash(*active->app);
  if (common.dump) {
    out << "# config-hash: " << hash << "\n" << active->app->config_to_str(true, false);
    return kExitOk;
  }
  for (const auto& flag : active->required) {
    if (active->app->get_option(flag)->count() == 0) return usage(flag + " is required");
  }
  bool root_on_command_line = false;
  for (const auto& a : args) root_on_command_line |= a == "--data-root" || a.rfind("--data-root=", 0) == 0;
  const char* env = std::getenv("ATLASBENCH_DATA");
  data_root = env && *env && !root_on_command_line ? fs::path(env) : fs::path(common.data_root);

  const fs::path dir(common.out);
  json manifest{{"command", active->app->get_name()},
                {"version", version()},
                {"config_hash", hash},
                {"config", active->app->config_to_str(true, false)},
                {"arguments", args},
                {"data_root", data_root.string()},
                {"started", started}};
  auto finish = [&](const std::string& status, const json& result) {
    manifest["finished"] = utc_now();
    manifest["status"] = status;
    manifest["result"] = result;
    try {
      write_json(dir / "manifest.json", manifest);
    } catch (const std::exception& e) {
      err << "warning: cannot write manifest: " << e.what() << "\n";
    }
  };
  try {
    fs::create_directories(dir);
    const json result = active->run(dir);
    finish("ok", result);
    return kExitOk;
  } catch (const UsageError& e) {
    return usage(e.what());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    finish("error", json{{"error", e.what()}});
    return kExitRuntime;
  }
}

}  // namespace atlasbench::cli
