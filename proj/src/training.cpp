#include "dcount/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "dcount/checkpoint.hpp"
#include "dcount/config.hpp"
#include "dcount/error.hpp"
#include "dcount/hash.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

#ifndef DCOUNT_CODE_VERSION
#define DCOUNT_CODE_VERSION "dev"
#endif

namespace dcount {

std::string code_version() { return DCOUNT_CODE_VERSION; }

std::string to_string(Stage s) {
  return s == Stage::counter ? "counter" : "localizer";
}

void RunConfig::validate() const {
  const std::string p = "train_" + to_string(stage) + ".";
  if (!(lr_max > 0.0)) throw ConfigError(p + "lr_max must be > 0");
  if (lr_min < 0.0 || lr_min > lr_max) {
    throw ConfigError(p + "lr_min must lie in [0, lr_max]");
  }
  if (batch_size < 1) throw ConfigError(p + "batch_size must be >= 1");
  if (epochs < 1) throw ConfigError(p + "epochs must be >= 1");
  if (restart_period_t0 < 0) throw ConfigError(p + "restart_period_T0 must be >= 0");
  if (restart_mult < 1.0) throw ConfigError(p + "restart_mult must be >= 1");
  if (!(grad_clip > 0.0)) throw ConfigError(p + "grad_clip must be > 0");
}

double cosine_lr(double t_cur, double period, double lr_min, double lr_max) {
  if (t_cur == 0.0) return lr_max;
  return lr_min +
         0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t_cur / period));
}

double lr_schedule(long step, const RunConfig& cfg) {
  if (step < 0) throw InputError("lr_schedule: step must be >= 0");
  if (cfg.restart_period_t0 < 1) {
    throw ConfigError("lr_schedule: restart period must be resolved to >= 1");
  }
  double t_cur = static_cast<double>(step);
  double period = static_cast<double>(cfg.restart_period_t0);
  if (cfg.restart_mult == 1.0) {
    t_cur = std::fmod(t_cur, period);
  } else {
    while (t_cur >= period) {
      t_cur -= period;
      period *= cfg.restart_mult;
    }
  }
  return cosine_lr(t_cur, period, cfg.lr_min, cfg.lr_max);
}

long resolve_restart_period(const RunConfig& cfg, long steps_per_epoch) {
  return cfg.restart_period_t0 > 0 ? cfg.restart_period_t0
                                   : 10 * std::max(1L, steps_per_epoch);
}

namespace {

struct Batch {
  std::vector<std::size_t> indices;
  std::vector<data::AugmentOp> ops;
};

// Shuffled, augmented batch plan for one epoch. Depends only on the data RNG,
// never on model state, so paired runs see identical data orders.
std::vector<Batch> plan_epoch(std::size_t n, int batch_size, bool augment,
                              bool square, std::mt19937_64& rng, Sha256& order) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_int_distribution<int> pick(0, 4);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    Batch b;
    for (std::size_t j = i; j < std::min(n, i + batch_size); ++j) {
      data::AugmentOp op = data::AugmentOp::identity;
      if (augment) {
        op = data::kAllAugmentOps[pick(rng)];
        if (!square && (op == data::AugmentOp::rot90cw || op == data::AugmentOp::rot90ccw)) {
          op = data::AugmentOp::identity;
        }
      }
      b.indices.push_back(perm[j]);
      b.ops.push_back(op);
      order.update_pod(static_cast<std::uint64_t>(perm[j]));
      order.update_pod(static_cast<int>(op));
    }
    out.push_back(std::move(b));
  }
  return out;
}

bool all_square(const std::vector<data::ImageSample>& s) {
  return std::all_of(s.begin(), s.end(),
                     [](const auto& x) { return x.height() == x.width(); });
}

std::vector<std::vector<float>> snapshot(const std::vector<nn::Param*>& params) {
  std::vector<std::vector<float>> out;
  for (const nn::Param* p : params) {
    out.emplace_back(p->value.data(), p->value.data() + p->value.size());
  }
  return out;
}

void restore(const std::vector<nn::Param*>& params,
             const std::vector<std::vector<float>>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(snap[i].begin(), snap[i].end(), params[i]->value.data());
  }
}

std::string batch_ids(const std::vector<data::ImageSample>& train, const Batch& b) {
  std::string s;
  for (std::size_t i : b.indices) s += (s.empty() ? "" : ",") + train[i].source_id;
  return s;
}

// Metrics live in manifest.json (deterministic) and metrics.csv; wall-clock
// goes to timing.json so manifests of identical runs compare byte-equal.
class RunRecorder {
 public:
  RunRecorder(const fs::path& dir, json manifest, std::vector<std::string> columns)
      : dir_(dir), manifest_(std::move(manifest)), columns_(std::move(columns)) {
    fs::create_directories(dir_);
    manifest_["epochs"] = json::array();
    manifest_["status"] = "running";
    std::ofstream csv(dir_ / "metrics.csv", std::ios::trunc);
    for (std::size_t i = 0; i < columns_.size(); ++i) csv << (i ? "," : "") << columns_[i];
    csv << "\n";
    start_ = std::chrono::steady_clock::now();
  }

  void epoch(const json& row, double seconds) {
    manifest_["epochs"].push_back(row);
    epoch_seconds_.push_back(seconds);
    std::ofstream csv(dir_ / "metrics.csv", std::ios::app);
    for (std::size_t i = 0; i < columns_.size(); ++i) {
      csv << (i ? "," : "") << row.at(columns_[i]).dump();
    }
    csv << "\n";
    flush();
  }

  json& manifest() { return manifest_; }

  void flush() {
    write_file_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n");
    const double total = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start_).count();
    write_file_atomic(dir_ / "timing.json",
                      json{{"epoch_seconds", epoch_seconds_},
                           {"total_seconds", total}}.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  json manifest_;
  std::vector<std::string> columns_;
  std::vector<double> epoch_seconds_;
  std::chrono::steady_clock::time_point start_;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void check_divisible(const std::vector<data::ImageSample>& samples, int div,
                     const std::string& who) {
  for (const auto& s : samples) {
    if (s.height() % div != 0 || s.width() % div != 0) {
      throw ShapeError(who + ": sample " + s.source_id + " is " +
                       std::to_string(s.width()) + "x" + std::to_string(s.height()) +
                       "; height and width must be divisible by " + std::to_string(div));
    }
  }
}

}  // namespace

TrainResult train_counter(const RunConfig& cfg_in, const CounterConfig& model,
                          const std::vector<data::ImageSample>& samples,
                          const TrainIo& io) {
  RunConfig cfg = cfg_in;
  cfg.stage = Stage::counter;
  cfg.validate();
  model.validate();
  const auto train = data::select_split(samples, data::Split::train);
  if (train.empty()) throw ConfigError("train_counter: dataset has no train samples");
  auto val = data::select_split(samples, data::Split::val);
  const bool val_is_train = val.empty();
  if (val_is_train) val = train;
  check_divisible(samples, kBackboneStride, "train_counter");

  const long steps_per_epoch =
      static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  cfg.restart_period_t0 = resolve_restart_period(cfg, steps_per_epoch);

  Counter counter(model, cfg.seed);
  if (model.input_standardize && model.input_mean.empty()) {
    std::vector<const cv::Mat*> ims;
    for (const auto& s : train) ims.push_back(&s.image);
    auto [mean, stdev] = channel_statistics(ims);
    counter.set_input_stats(std::move(mean), std::move(stdev));
  }
  const auto params = counter.params();
  nn::Adam adam(params);
  std::mt19937_64 data_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  Sha256 order_hash;

  json manifest;
  manifest["kind"] = "counter_run";
  manifest["code_version"] = code_version();
  manifest["config"] = io.resolved_config.is_null()
                           ? json{{"counter", to_json(model)}, {"train_counter", to_json(cfg_in)}}
                           : io.resolved_config;
  manifest["run"] = to_json(cfg);
  manifest["model"] = to_json(counter.config());
  manifest["dataset"] = {{"hash", data::dataset_hash(samples)},
                         {"train", train.size()},
                         {"val", val_is_train ? 0 : val.size()},
                         {"val_source", val_is_train ? "train" : "val"}};
  manifest["pretrained_loaded"] = counter.pretrained_loaded();
  RunRecorder rec(io.out_dir, manifest,
                  {"epoch", "lr", "train_loss", "val_mae", "val_mse"});

  TrainResult result;
  std::vector<std::vector<float>> best;
  const bool square = all_square(train);
  long step = 0;
  double lr = cfg.lr_max;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (const Batch& b : plan_epoch(train.size(), cfg.batch_size, cfg.augmentation,
                                     square, data_rng, order_hash)) {
      std::vector<cv::Mat> images;
      std::vector<double> labels;
      for (std::size_t k = 0; k < b.indices.size(); ++k) {
        const auto& s = train[b.indices[k]];
        images.push_back(data::augment_mat(s.image, b.ops[k]));
        labels.push_back(static_cast<double>(s.count()));
      }
      nn::zero_grads(params);
      const Tensor z = counter.forward(stack_images(images));
      CountLoss loss = count_loss(z, labels, model.head_nonneg);
      if (!std::isfinite(loss.loss)) {
        std::ostringstream os;
        os << "non-finite counter loss at epoch " << epoch << " step " << step
           << " (lr " << lr << ", batch " << batch_ids(train, b) << ")";
        throw TrainingError(os.str());
      }
      counter.backward(std::move(loss.grad));
      nn::clip_grad_norm(params, cfg.grad_clip);
      lr = lr_schedule(step++, cfg);
      adam.step(lr);
      loss_sum += loss.loss * static_cast<double>(b.indices.size());
    }
    const double train_loss = loss_sum / static_cast<double>(train.size());

    double abs_sum = 0.0, sq_sum = 0.0;
    for (const auto& s : val) {
      const double err = counter.infer(s.image).count - static_cast<double>(s.count());
      abs_sum += std::fabs(err);
      sq_sum += err * err;
    }
    const double val_mae = abs_sum / static_cast<double>(val.size());
    const double val_mse = sq_sum / static_cast<double>(val.size());
    if (result.best_epoch < 0 || val_mae < result.best_val_metric) {
      result.best_val_metric = val_mae;
      result.best_epoch = epoch;
      best = snapshot(params);
    }
    result.epoch_losses.push_back(train_loss);
    rec.epoch({{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss},
               {"val_mae", val_mae}, {"val_mse", val_mse}},
              seconds_since(t0));
    if (io.verbose) {
      std::clog << "[counter] epoch " << epoch + 1 << "/" << cfg.epochs
                << " loss " << train_loss << " val_mae " << val_mae << "\n";
    }
  }

  restore(params, best);
  result.checkpoint = io.out_dir / "counter.ckpt";
  result.data_order_hash = order_hash.hex();
  json& m = rec.manifest();
  m["data_order_hash"] = result.data_order_hash;
  m["best"] = {{"epoch", result.best_epoch}, {"val_mae", result.best_val_metric}};
  m["checkpoint"] = result.checkpoint.filename().string();
  m["weights_sha256"] = params_hash(params);
  m["status"] = "complete";
  counter.save(result.checkpoint,
               {{"epoch", result.best_epoch},
                {"val_mae", result.best_val_metric},
                {"seed", cfg.seed},
                {"dataset_hash", m["dataset"]["hash"]},
                {"code_version", code_version()},
                {"config", m["config"]}});
  rec.flush();
  result.manifest = m;
  result.manifest_path = io.out_dir / "manifest.json";
  return result;
}

TrainResult train_localizer(const RunConfig& cfg_in, const LocalizerConfig& model_in,
                            const std::vector<data::ImageSample>& samples,
                            const fs::path& counter_checkpoint, const TrainIo& io) {
  RunConfig cfg = cfg_in;
  cfg.stage = Stage::localizer;
  cfg.validate();
  if (counter_checkpoint.empty() || !fs::exists(counter_checkpoint)) {
    throw DependencyError("train_localizer: counter checkpoint '" +
                          counter_checkpoint.string() + "' not found");
  }
  auto counter = Counter::load(counter_checkpoint);
  const auto counter_params = counter->params();
  const std::string counter_hash_before = params_hash(counter_params);

  const auto train = data::select_split(samples, data::Split::train);
  if (train.empty()) throw ConfigError("train_localizer: dataset has no train samples");
  auto val = data::select_split(samples, data::Split::val);
  const bool val_is_train = val.empty();
  if (val_is_train) val = train;

  LocalizerConfig model = model_in;
  model.in_channels = train.front().image.channels() + 1;
  model.validate();
  check_divisible(samples, std::max(kBackboneStride, 1 << model.depth), "train_localizer");

  const long steps_per_epoch =
      static_cast<long>((train.size() + cfg.batch_size - 1) / cfg.batch_size);
  cfg.restart_period_t0 = resolve_restart_period(cfg, steps_per_epoch);

  Localizer localizer(model, cfg.seed);
  auto params = localizer.params();
  if (model.joint_finetune) {
    params.insert(params.end(), counter_params.begin(), counter_params.end());
  }
  nn::Adam adam(params);
  std::mt19937_64 data_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  Sha256 order_hash;

  std::vector<data::DensityMap> gt;
  for (const auto& s : train) {
    gt.push_back(data::rasterize_density(s.dots, s.height(), s.width(), model.sigma));
  }

  json manifest;
  manifest["kind"] = "localizer_run";
  manifest["code_version"] = code_version();
  manifest["config"] = io.resolved_config.is_null()
                           ? json{{"localizer", to_json(model_in)},
                                  {"train_localizer", to_json(cfg_in)}}
                           : io.resolved_config;
  manifest["run"] = to_json(cfg);
  manifest["model"] = to_json(model);
  manifest["counter"] = {{"checkpoint", counter_checkpoint.string()},
                         {"weights_sha256", counter_hash_before},
                         {"frozen", !model.joint_finetune}};
  manifest["dataset"] = {{"hash", data::dataset_hash(samples)},
                         {"train", train.size()},
                         {"val", val_is_train ? 0 : val.size()},
                         {"val_source", val_is_train ? "train" : "val"}};
  RunRecorder rec(io.out_dir, manifest,
                  {"epoch", "lr", "train_loss", "val_mse", "val_fine_mae"});

  TrainResult result;
  std::vector<std::vector<float>> best;
  const bool square = all_square(train);
  const int image_channels = model.in_channels - 1;
  long step = 0;
  double lr = cfg.lr_max;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    for (const Batch& b : plan_epoch(train.size(), cfg.batch_size, cfg.augmentation,
                                     square, data_rng, order_hash)) {
      std::vector<cv::Mat> images, maps;
      std::vector<double> labels;
      for (std::size_t k = 0; k < b.indices.size(); ++k) {
        const auto& s = train[b.indices[k]];
        images.push_back(data::augment_mat(s.image, b.ops[k]));
        maps.push_back(data::augment_mat(gt[b.indices[k]].values, b.ops[k]));
        labels.push_back(static_cast<double>(s.count()));
      }
      nn::zero_grads(params);
      const Tensor x = stack_images(images);
      Tensor coarse = counter->forward(x);
      if (model.teacher_forcing) {
        const std::size_t plane = coarse.shape().plane();
        for (int n = 0; n < coarse.n(); ++n) {
          const double c = l1_count(coarse, n);
          const float scale = c > 0.0 ? static_cast<float>(labels[n] / c) : 1.0f;
          float* p = coarse.sample(n);
          for (std::size_t i = 0; i < plane; ++i) p[i] *= scale;
        }
      }
      const Tensor pred = localizer.forward(condition_inputs(x, coarse));
      MseLoss loss = localizer_loss(pred, stack_maps(maps));
      if (!std::isfinite(loss.loss)) {
        std::ostringstream os;
        os << "non-finite localizer loss at epoch " << epoch << " step " << step
           << " (lr " << lr << ", batch " << batch_ids(train, b) << ")";
        throw TrainingError(os.str());
      }
      const Tensor g_in = localizer.backward(std::move(loss.grad));
      if (model.joint_finetune) {
        counter->backward(condition_backward_coarse(g_in, image_channels, kCoarseStride));
      }
      nn::clip_grad_norm(params, cfg.grad_clip);
      lr = lr_schedule(step++, cfg);
      adam.step(lr);
      loss_sum += loss.loss * static_cast<double>(b.indices.size());
    }
    const double train_loss = loss_sum / static_cast<double>(train.size());

    double mse_sum = 0.0, fine_abs = 0.0;
    for (const auto& s : val) {
      const CoarseMap coarse = counter->infer(s.image);
      const data::DensityMap fine = localizer.infer(s.image, coarse);
      const data::DensityMap target =
          data::rasterize_density(s.dots, s.height(), s.width(), model.sigma);
      mse_sum += localizer_loss(fine, target);
      fine_abs += std::fabs(fine.total - static_cast<double>(s.count()));
    }
    const double val_mse = mse_sum / static_cast<double>(val.size());
    const double val_fine_mae = fine_abs / static_cast<double>(val.size());
    if (result.best_epoch < 0 || val_mse < result.best_val_metric) {
      result.best_val_metric = val_mse;
      result.best_epoch = epoch;
      best = snapshot(params);
    }
    result.epoch_losses.push_back(train_loss);
    rec.epoch({{"epoch", epoch}, {"lr", lr}, {"train_loss", train_loss},
               {"val_mse", val_mse}, {"val_fine_mae", val_fine_mae}},
              seconds_since(t0));
    if (io.verbose) {
      std::clog << "[localizer] epoch " << epoch + 1 << "/" << cfg.epochs
                << " mse " << train_loss << " val_mse " << val_mse << "\n";
    }
  }

  restore(params, best);
  const std::string counter_hash_after = params_hash(counter_params);
  if (!model.joint_finetune && counter_hash_after != counter_hash_before) {
    throw TrainingError("train_localizer: frozen counter parameters were modified");
  }
  result.checkpoint = io.out_dir / "localizer.ckpt";
  result.data_order_hash = order_hash.hex();
  json& m = rec.manifest();
  m["data_order_hash"] = result.data_order_hash;
  m["best"] = {{"epoch", result.best_epoch}, {"val_mse", result.best_val_metric}};
  m["checkpoint"] = result.checkpoint.filename().string();
  m["weights_sha256"] = params_hash(localizer.params());
  m["counter"]["weights_sha256_after"] = counter_hash_after;
  m["status"] = "complete";
  localizer.save(result.checkpoint,
                 {{"epoch", result.best_epoch},
                  {"val_mse", result.best_val_metric},
                  {"seed", cfg.seed},
                  {"counter_checkpoint", counter_checkpoint.string()},
                  {"counter_weights_sha256", counter_hash_after},
                  {"code_version", code_version()},
                  {"config", m["config"]}});
  if (model.joint_finetune) {
    counter->save(io.out_dir / "counter_finetuned.ckpt",
                  {{"code_version", code_version()}, {"config", m["config"]}});
  }
  rec.flush();
  result.manifest = m;
  result.manifest_path = io.out_dir / "manifest.json";
  return result;
}

}  // namespace dcount
