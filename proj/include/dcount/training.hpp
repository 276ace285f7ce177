#pragma once

// Two-stage optimisation: the counter is trained alone on |‖z‖₁ - y|, then the
// localizer is trained with MSE against rasterized density maps while the
// counter stays frozen. Adam with SGDR-style cosine warm restarts, global-norm
// gradient clipping, best-validation-MAE checkpointing.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcount/counter.hpp"
#include "dcount/data.hpp"
#include "dcount/localizer.hpp"

namespace dcount {

enum class Stage { counter, localizer };
std::string to_string(Stage s);

struct RunConfig {
  Stage stage = Stage::counter;
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  int batch_size = 8;
  int epochs = 30;
  // Length of the first cosine cycle in optimizer steps; 0 means ten epochs.
  long restart_period_t0 = 0;
  double restart_mult = 2.0;
  std::uint64_t seed = 1;
  bool augmentation = true;
  double grad_clip = 10.0;
  std::string dataset_root;
  std::string checkpoint_dir;
  // Localizer stage only: the trained counter to condition on.
  std::string counter_checkpoint;

  void validate() const;
};

// lr_min + (lr_max - lr_min) * (1 + cos(pi * t_cur / period)) / 2
double cosine_lr(double t_cur, double period, double lr_min, double lr_max);
// Warm-restart schedule; cycle i lasts t0 * mult^i steps and starts at
// lr_max. cfg.restart_period_t0 must already be resolved (>= 1).
double lr_schedule(long step, const RunConfig& cfg);
long resolve_restart_period(const RunConfig& cfg, long steps_per_epoch);

struct TrainIo {
  std::filesystem::path out_dir;
  // Fully resolved experiment configuration echoed into the manifest.
  nlohmann::json resolved_config;
  bool verbose = false;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest_path;
  nlohmann::json manifest;
  std::vector<double> epoch_losses;
  double best_val_metric = 0.0;
  int best_epoch = -1;
  std::string data_order_hash;
};

TrainResult train_counter(const RunConfig& cfg, const CounterConfig& model,
                          const std::vector<data::ImageSample>& samples,
                          const TrainIo& io);

TrainResult train_localizer(const RunConfig& cfg, const LocalizerConfig& model,
                            const std::vector<data::ImageSample>& samples,
                            const std::filesystem::path& counter_checkpoint,
                            const TrainIo& io);

std::string code_version();

}  // namespace dcount
