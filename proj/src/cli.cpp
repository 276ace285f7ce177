#include "dcount/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "dcount/checkpoint.hpp"
#include "dcount/error.hpp"
#include "dcount/evaluation.hpp"
#include "dcount/hash.hpp"
#include "dcount/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace dcount::cli {

ResolvedConfig resolve_config(const CliInvocation& inv) {
  json doc = inv.config_path.empty() ? json::object() : load_config_file(inv.config_path);
  doc = apply_overrides(std::move(doc), inv.overrides);
  ResolvedConfig r;
  r.config = parse_config(doc);
  r.doc = to_json(r.config);
  r.hash = config_hash(r.doc);
  return r;
}

fs::path make_run_dir(const fs::path& output_dir, const std::string& config_hash) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string base = std::string(stamp) + "-" + config_hash;
  fs::path dir = output_dir / base;
  for (int i = 1; fs::exists(dir); ++i) dir = output_dir / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

namespace {

void check_device() {
  const char* dev = std::getenv("DCOUNT_DEVICE");
  if (dev && std::string(dev) != "cpu" && std::string(dev) != "") {
    throw ConfigError("DCOUNT_DEVICE='" + std::string(dev) +
                      "' is not available; this build only supports 'cpu'");
  }
}

void write_config_echo(const fs::path& run_dir, const ResolvedConfig& rc) {
  write_file_atomic(run_dir / "config.json", rc.doc.dump(2) + "\n");
}

std::vector<data::ImageSample> load_for(const ExperimentConfig& c,
                                        const std::string& root_override,
                                        const std::string& override_key,
                                        bool apply_preprocess = true) {
  const std::string root = root_override.empty() ? c.data.root : root_override;
  const std::string key = root_override.empty() ? "data.root" : override_key;
  if (root.empty()) throw ConfigError(key + " is required");
  if (!fs::is_directory(root)) {
    throw ConfigError(key + ": dataset directory '" + root + "' does not exist");
  }
  auto samples = data::load_dataset(root, c.data.layout());
  if (samples.empty()) throw ConfigError(key + ": no images found under '" + root + "'");
  if (apply_preprocess && c.data.preprocess != data::Preprocess::none) {
    samples = data::preprocess(samples, c.data.preprocess, c.data.tile);
  }
  return samples;
}

fs::path require_file(const std::string& path, const std::string& key) {
  if (path.empty()) throw ConfigError(key + " is required");
  if (!fs::is_regular_file(path)) {
    throw ConfigError(key + ": file '" + path + "' does not exist");
  }
  return path;
}

json files_json(const std::vector<data::WrittenFile>& files) {
  json out = json::array();
  for (const auto& f : files) {
    out.push_back({{"id", f.id},
                   {"split", data::to_string(f.split)},
                   {"image_sha256", f.image_sha256},
                   {"annotation_sha256", f.annotation_sha256}});
  }
  return out;
}

int cmd_synth(const ResolvedConfig& rc, std::ostream& out) {
  const ExperimentConfig& c = rc.config;
  const auto samples = data::generate_synthetic(c.synth);
  const fs::path root = c.synth_output;
  const auto files = data::write_dataset(root, samples);
  // Hash of the dataset as it reads back from disk, which is what training sees.
  const auto reloaded = data::load_dataset(root);
  json manifest = {{"kind", "synth"},
                   {"code_version", code_version()},
                   {"config", rc.doc},
                   {"dataset_hash", data::dataset_hash(reloaded)},
                   {"num_images", samples.size()},
                   {"files", files_json(files)}};
  write_file_atomic(root / "manifest.json", manifest.dump(2) + "\n");
  out << "synth: wrote " << samples.size() << " images to " << root.string() << "\n";
  return kExitOk;
}

int cmd_prep(const ResolvedConfig& rc, std::ostream& out) {
  const ExperimentConfig& c = rc.config;
  const auto samples = load_for(c, "", "data.root");
  const fs::path run_dir = make_run_dir(c.output_dir, rc.hash);
  write_config_echo(run_dir, rc);
  const fs::path root = run_dir / "dataset";
  const auto files = data::write_dataset(root, samples);
  json manifest = {{"kind", "prep"},
                   {"code_version", code_version()},
                   {"config", rc.doc},
                   {"preprocess", data::to_string(c.data.preprocess)},
                   {"dataset_hash", data::dataset_hash(data::load_dataset(root))},
                   {"num_samples", samples.size()},
                   {"files", files_json(files)}};
  write_file_atomic(root / "manifest.json", manifest.dump(2) + "\n");
  out << "prep: wrote " << samples.size() << " samples to " << root.string() << "\n";
  return kExitOk;
}

void copy_to_checkpoint_dir(const std::string& dir, const fs::path& ckpt) {
  if (dir.empty()) return;
  fs::create_directories(dir);
  fs::copy_file(ckpt, fs::path(dir) / ckpt.filename(), fs::copy_options::overwrite_existing);
}

int cmd_train_counter(const ResolvedConfig& rc, bool verbose, std::ostream& out) {
  const ExperimentConfig& c = rc.config;
  const auto samples = load_for(c, c.train_counter.dataset_root, "train_counter.dataset_root");
  const fs::path run_dir = make_run_dir(c.output_dir, rc.hash);
  write_config_echo(run_dir, rc);
  const TrainResult r =
      train_counter(c.train_counter, c.counter, samples, {run_dir, rc.doc, verbose});
  copy_to_checkpoint_dir(c.train_counter.checkpoint_dir, r.checkpoint);
  out << "train-counter: best val MAE " << r.best_val_metric << " at epoch "
      << r.best_epoch << "; checkpoint " << r.checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_train_localizer(const ResolvedConfig& rc, bool verbose, std::ostream& out) {
  const ExperimentConfig& c = rc.config;
  if (c.train_localizer.counter_checkpoint.empty()) {
    throw ConfigError("train_localizer.counter_checkpoint is required");
  }
  const auto samples =
      load_for(c, c.train_localizer.dataset_root, "train_localizer.dataset_root");
  const fs::path run_dir = make_run_dir(c.output_dir, rc.hash);
  write_config_echo(run_dir, rc);
  const TrainResult r = train_localizer(c.train_localizer, c.localizer, samples,
                                        c.train_localizer.counter_checkpoint,
                                        {run_dir, rc.doc, verbose});
  copy_to_checkpoint_dir(c.train_localizer.checkpoint_dir, r.checkpoint);
  out << "train-localizer: best val MSE " << r.best_val_metric << " at epoch "
      << r.best_epoch << "; checkpoint " << r.checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_eval(const ResolvedConfig& rc, std::ostream& out) {
  const ExperimentConfig& c = rc.config;
  const fs::path counter = require_file(c.eval.counter_checkpoint, "eval.counter_checkpoint");
  const fs::path localizer =
      c.eval.localizer_checkpoint.empty()
          ? fs::path()
          : require_file(c.eval.localizer_checkpoint, "eval.localizer_checkpoint");
  const auto samples = load_for(c, "", "data.root");
  const fs::path run_dir = make_run_dir(c.output_dir, rc.hash);
  write_config_echo(run_dir, rc);
  eval::EvalReport report = eval::evaluate_checkpoints(counter, localizer, samples, c.eval.split);
  report.meta["config"] = rc.doc;
  report.meta["code_version"] = code_version();
  report.write(run_dir);
  out << "eval: " << data::to_string(c.eval.split) << " MAE " << report.mae << " MSE " << report.mse
      << " over " << report.rows.size() << " images; report "
      << (run_dir / "report.json").string() << "\n";
  return kExitOk;
}

int cmd_ablate(const ResolvedConfig& rc, bool verbose, std::ostream& out) {
  ExperimentConfig full = rc.config;
  full.counter.gmp_enabled = true;
  ExperimentConfig without = full;
  without.counter.gmp_enabled = false;
  const auto samples = load_for(full, full.train_counter.dataset_root,
                                "train_counter.dataset_root");
  const fs::path run_dir = make_run_dir(full.output_dir, rc.hash);
  write_config_echo(run_dir, rc);
  const eval::AblationResult r =
      eval::run_ablation(full, without, samples, full.ablate.seeds, run_dir, verbose);
  out << r.summary_csv();
  out << "ablate: summary " << (run_dir / "ablation_summary.csv").string() << "\n";
  return kExitOk;
}

int cmd_viz(const ResolvedConfig& rc, std::ostream& out) {
  const ExperimentConfig& c = rc.config;
  const fs::path counter_path =
      require_file(c.eval.counter_checkpoint, "eval.counter_checkpoint");
  std::unique_ptr<Localizer> localizer;
  if (!c.eval.localizer_checkpoint.empty()) {
    localizer = Localizer::load(
        require_file(c.eval.localizer_checkpoint, "eval.localizer_checkpoint"));
  }
  auto counter = Counter::load(counter_path);
  const auto samples = data::select_split(load_for(c, "", "data.root"), c.eval.split);
  const fs::path run_dir = make_run_dir(c.output_dir, rc.hash);
  write_config_echo(run_dir, rc);
  int written = 0;
  for (const auto& s : samples) {
    if (written >= c.viz.max_images) break;
    const CoarseMap coarse = counter->infer(s.image);
    cv::Mat fine;
    data::DotAnnotation dots;
    if (localizer) {
      const data::DensityMap map = localizer->infer(s.image, coarse);
      fine = map.values;
      const LocalizerConfig& lc = localizer->config();
      dots = extract_peaks(map, lc.resolved_min_distance(), lc.resolved_threshold());
    }
    const fs::path png = run_dir / "viz" / (s.source_id + ".png");
    const auto panel = eval::export_visuals(s.image, coarse.values, fine, dots, png);
    out << "viz: " << png.string() << " count " << panel.count_text << " (label "
        << s.count() << ")\n";
    ++written;
  }
  return kExitOk;
}

}  // namespace

int run(const CliInvocation& inv, std::ostream& out, std::ostream& err) {
  try {
    const auto& cmds = kSubcommands;
    if (std::find(cmds.begin(), cmds.end(), inv.subcommand) == cmds.end()) {
      err << "error: usage: unknown subcommand '" << inv.subcommand << "'\n";
      return kExitUsage;
    }
    check_device();
    const ResolvedConfig rc = resolve_config(inv);
    const std::string& s = inv.subcommand;
    if (s == "synth") return cmd_synth(rc, out);
    if (s == "prep") return cmd_prep(rc, out);
    if (s == "train-counter") return cmd_train_counter(rc, inv.verbose, out);
    if (s == "train-localizer") return cmd_train_localizer(rc, inv.verbose, out);
    if (s == "eval") return cmd_eval(rc, out);
    if (s == "ablate") return cmd_ablate(rc, inv.verbose, out);
    return cmd_viz(rc, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.kind() << ": " << e.what() << "\n";
    return kExitConfig;
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: runtime: " << e.what() << "\n";
    return kExitRuntime;
  }
}

int main(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Decoupled cell counting pipeline"};
  app.require_subcommand(1);
  CliInvocation inv;
  const std::map<std::string, std::string> help = {
      {"synth", "generate a synthetic fluorescence dataset"},
      {"prep", "preprocess a dataset (pad_tile, resize, quadrants) and write it out"},
      {"train-counter", "train the counting network"},
      {"train-localizer", "train the localizer against a frozen counter"},
      {"eval", "score checkpoints on a split (MAE/MSE report)"},
      {"ablate", "paired-seed comparison with and without message passing"},
      {"viz", "export input / coarse / fine / dots panels"}};
  for (const std::string& name : kSubcommands) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("-c,--config", inv.config_path, "JSON config file");
    sub->add_option("-s,--set", inv.overrides, "dotted.key=value override")
        ->allow_extra_args(false);
    sub->add_flag("-v,--verbose", inv.verbose, "per-epoch progress on stderr");
    sub->callback([&inv, name] { inv.subcommand = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands()[0]->help());
      return kExitOk;
    }
    err << "error: usage: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }
  return run(inv, out, err);
}

}  // namespace dcount::cli
