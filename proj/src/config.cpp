#include "dcount/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "dcount/error.hpp"
#include "dcount/hash.hpp"

using json = nlohmann::json;

namespace dcount {

namespace {

// Reads typed fields out of one JSON object and remembers which keys were
// consumed, so leftovers can be reported.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  template <typename T, typename Parse>
  void get_as(const std::string& key, T& out, Parse parse) {
    std::string s;
    get(key, s);
    if (j_.contains(key)) out = parse(s);
  }

  void get_range(const std::string& key, double& lo, double& hi) {
    std::vector<double> v{lo, hi};
    get(key, v);
    if (v.size() != 2) throw ConfigError(where(key) + " must be [min, max]");
    lo = v[0];
    hi = v[1];
  }

  const json* section(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + where(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read(const json& j, const std::string& path, data::SynthConfig& c) {
  Reader r(j, path);
  r.get("num_images", c.num_images);
  std::vector<int> size{c.height, c.width};
  r.get("image_size", size);
  if (size.size() != 2) throw ConfigError(r.where("image_size") + " must be [H, W]");
  c.height = size[0];
  c.width = size[1];
  r.get("count_mean", c.count_mean);
  r.get("count_std", c.count_std);
  r.get_range("cell_radius_range", c.radius_min, c.radius_max);
  r.get_range("blur_sigma_range", c.blur_min, c.blur_max);
  r.get("overlap_allowed", c.overlap_allowed);
  r.get("noise_std", c.noise_std);
  r.get("seed", c.seed);
  r.finish();
}

void read(const json& j, const std::string& path, CounterConfig& c) {
  Reader r(j, path);
  r.get_as("backbone", c.backbone, parse_backbone);
  r.get("pretrained", c.pretrained);
  r.get("pretrained_path", c.pretrained_path);
  r.get("gmp_heads", c.gmp_heads);
  r.get("gmp_enabled", c.gmp_enabled);
  r.get("gmp_residual", c.gmp_residual);
  r.get("head_nonneg", c.head_nonneg);
  r.get("in_channels", c.in_channels);
  r.get("tiny_channels", c.tiny_channels);
  r.get("tiny_block_convs", c.tiny_block_convs);
  r.get("input_standardize", c.input_standardize);
  r.get("input_mean", c.input_mean);
  r.get("input_std", c.input_std);
  r.finish();
}

void read(const json& j, const std::string& path, LocalizerConfig& c) {
  Reader r(j, path);
  r.get("depth", c.depth);
  r.get("base_channels", c.base_channels);
  r.get("in_channels", c.in_channels);
  r.get("sigma", c.sigma);
  r.get("output_scale", c.output_scale);
  r.get("peak_threshold", c.peak_threshold);
  r.get("peak_min_distance", c.peak_min_distance);
  r.get("teacher_forcing", c.teacher_forcing);
  r.get("joint_finetune", c.joint_finetune);
  r.finish();
}

void read(const json& j, const std::string& path, RunConfig& c) {
  Reader r(j, path);
  r.get("lr_max", c.lr_max);
  r.get("lr_min", c.lr_min);
  r.get("batch_size", c.batch_size);
  r.get("epochs", c.epochs);
  r.get("restart_period_T0", c.restart_period_t0);
  r.get("restart_mult", c.restart_mult);
  r.get("seed", c.seed);
  r.get("augmentation", c.augmentation);
  r.get("grad_clip", c.grad_clip);
  r.get("dataset_root", c.dataset_root);
  r.get("checkpoint_dir", c.checkpoint_dir);
  r.get("counter_checkpoint", c.counter_checkpoint);
  r.finish();
}

}  // namespace

json to_json(const data::SynthConfig& c) {
  return {{"num_images", c.num_images},
          {"image_size", {c.height, c.width}},
          {"count_mean", c.count_mean},
          {"count_std", c.count_std},
          {"cell_radius_range", {c.radius_min, c.radius_max}},
          {"blur_sigma_range", {c.blur_min, c.blur_max}},
          {"overlap_allowed", c.overlap_allowed},
          {"noise_std", c.noise_std},
          {"seed", c.seed}};
}

json to_json(const CounterConfig& c) {
  return {{"backbone", to_string(c.backbone)},
          {"pretrained", c.pretrained},
          {"pretrained_path", c.pretrained_path},
          {"gmp_heads", c.gmp_heads},
          {"gmp_enabled", c.gmp_enabled},
          {"gmp_residual", c.gmp_residual},
          {"head_nonneg", c.head_nonneg},
          {"in_channels", c.in_channels},
          {"tiny_channels", c.tiny_channels},
          {"tiny_block_convs", c.tiny_block_convs},
          {"input_standardize", c.input_standardize},
          {"input_mean", c.input_mean},
          {"input_std", c.input_std}};
}

json to_json(const LocalizerConfig& c) {
  return {{"depth", c.depth},
          {"base_channels", c.base_channels},
          {"in_channels", c.in_channels},
          {"sigma", c.sigma},
          {"output_scale", c.output_scale},
          {"peak_threshold", c.peak_threshold},
          {"peak_min_distance", c.peak_min_distance},
          {"teacher_forcing", c.teacher_forcing},
          {"joint_finetune", c.joint_finetune}};
}

json to_json(const RunConfig& c) {
  return {{"lr_max", c.lr_max},
          {"lr_min", c.lr_min},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"restart_period_T0", c.restart_period_t0},
          {"restart_mult", c.restart_mult},
          {"seed", c.seed},
          {"augmentation", c.augmentation},
          {"grad_clip", c.grad_clip},
          {"dataset_root", c.dataset_root},
          {"checkpoint_dir", c.checkpoint_dir},
          {"counter_checkpoint", c.counter_checkpoint}};
}

json to_json(const ExperimentConfig& c) {
  return {{"synth", to_json(c.synth)},
          {"synth_output", c.synth_output},
          {"data",
           {{"root", c.data.root},
            {"preprocess", data::to_string(c.data.preprocess)},
            {"tile", c.data.tile},
            {"split_seed", c.data.split_seed},
            {"sigma", c.data.sigma},
            {"images_dir", c.data.images_dir},
            {"annotations_dir", c.data.annotations_dir}}},
          {"counter", to_json(c.counter)},
          {"localizer", to_json(c.localizer)},
          {"train_counter", to_json(c.train_counter)},
          {"train_localizer", to_json(c.train_localizer)},
          {"eval",
           {{"counter_checkpoint", c.eval.counter_checkpoint},
            {"localizer_checkpoint", c.eval.localizer_checkpoint},
            {"split", data::to_string(c.eval.split)}}},
          {"ablate",
           {{"seeds", c.ablate.seeds}, {"dataset_name", c.ablate.dataset_name}}},
          {"viz", {{"max_images", c.viz.max_images}}},
          {"output_dir", c.output_dir}};
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  c.train_localizer.stage = Stage::localizer;
  Reader r(j, "");
  if (const json* s = r.section("synth")) read(*s, "synth", c.synth);
  r.get("synth_output", c.synth_output);
  if (const json* s = r.section("data")) {
    Reader d(*s, "data");
    d.get("root", c.data.root);
    d.get_as("preprocess", c.data.preprocess, data::parse_preprocess);
    d.get("tile", c.data.tile);
    d.get("split_seed", c.data.split_seed);
    d.get("sigma", c.data.sigma);
    d.get("images_dir", c.data.images_dir);
    d.get("annotations_dir", c.data.annotations_dir);
    d.finish();
  }
  if (const json* s = r.section("counter")) read(*s, "counter", c.counter);
  if (const json* s = r.section("localizer")) read(*s, "localizer", c.localizer);
  if (const json* s = r.section("train_counter")) {
    read(*s, "train_counter", c.train_counter);
  }
  if (const json* s = r.section("train_localizer")) {
    read(*s, "train_localizer", c.train_localizer);
  }
  if (const json* s = r.section("eval")) {
    Reader e(*s, "eval");
    e.get("counter_checkpoint", c.eval.counter_checkpoint);
    e.get("localizer_checkpoint", c.eval.localizer_checkpoint);
    e.get_as("split", c.eval.split, data::parse_split);
    e.finish();
  }
  if (const json* s = r.section("ablate")) {
    Reader a(*s, "ablate");
    a.get("seeds", c.ablate.seeds);
    a.get("dataset_name", c.ablate.dataset_name);
    a.finish();
  }
  if (const json* s = r.section("viz")) {
    Reader v(*s, "viz");
    v.get("max_images", c.viz.max_images);
    v.finish();
  }
  r.get("output_dir", c.output_dir);
  r.finish();

  c.train_counter.stage = Stage::counter;
  c.train_localizer.stage = Stage::localizer;
  c.synth.validate();
  c.counter.validate();
  c.localizer.validate();
  c.train_counter.validate();
  c.train_localizer.validate();
  if (c.data.tile < 16 || c.data.tile % 16 != 0) {
    throw ConfigError("data.tile must be a positive multiple of 16");
  }
  if (!(c.data.sigma > 0.0)) throw ConfigError("data.sigma must be > 0");
  if (c.ablate.seeds.empty()) throw ConfigError("ablate.seeds must not be empty");
  return c;
}

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json apply_overrides(json doc, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + o + "' is not of the form key=value");
    }
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::parse_error&) {
      value = raw;
    }
    json* node = &doc;
    std::stringstream ks(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ks, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      json& next = (*node)[parts[i]];
      if (next.is_null()) next = json::object();
      if (!next.is_object()) throw ConfigError("override '" + key + "': " + parts[i] + " is not a section");
      node = &next;
    }
    (*node)[parts.back()] = value;
  }
  return doc;
}

std::string config_hash(const json& resolved) {
  return sha256_hex(resolved.dump()).substr(0, 12);
}

}  // namespace dcount
