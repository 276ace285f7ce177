#pragma once

// Count metrics, per-image evaluation with tile re-assembly, the paired GMP
// ablation, and panel exports of the counter/localizer outputs.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>

#include "dcount/config.hpp"
#include "dcount/counter.hpp"
#include "dcount/data.hpp"
#include "dcount/localizer.hpp"

namespace dcount::eval {

double mae(std::span<const double> preds, std::span<const double> gts);
double mse(std::span<const double> preds, std::span<const double> gts);

struct Prediction {
  double count = 0.0;
  // Sum of the localizer's fine map; NaN when no localizer is attached.
  double fine_sum = std::numeric_limits<double>::quiet_NaN();
};

class CountPredictor {
 public:
  virtual ~CountPredictor() = default;
  virtual Prediction predict(const data::ImageSample& sample) = 0;
};

// Returns the annotated count.
class OracleStub : public CountPredictor {
 public:
  Prediction predict(const data::ImageSample& sample) override {
    return {static_cast<double>(sample.count())};
  }
};

class ConstantStub : public CountPredictor {
 public:
  explicit ConstantStub(double value) : value_(value) {}
  Prediction predict(const data::ImageSample&) override { return {value_}; }

 private:
  double value_;
};

class ModelPredictor : public CountPredictor {
 public:
  explicit ModelPredictor(std::unique_ptr<Counter> counter,
                          std::unique_ptr<Localizer> localizer = nullptr);
  Prediction predict(const data::ImageSample& sample) override;

  Counter& counter() { return *counter_; }
  Localizer* localizer() { return localizer_.get(); }

 private:
  std::unique_ptr<Counter> counter_;
  std::unique_ptr<Localizer> localizer_;
};

struct EvalRow {
  std::string id;  // parent image id
  int tiles = 1;
  double y = 0.0;
  double y_hat = 0.0;
  double abs_err = 0.0;
  double fine_sum = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mae = 0.0;
  double mse = 0.0;
  nlohmann::json meta = nlohmann::json::object();

  nlohmann::json to_json() const;
  std::string to_csv() const;
  // Writes <dir>/<stem>.json and <dir>/<stem>.csv.
  void write(const std::filesystem::path& dir, const std::string& stem = "report") const;
};

// Scores one split. Samples sharing a parent_id are summed into one row, in
// order of first appearance.
EvalReport evaluate(CountPredictor& predictor,
                    const std::vector<data::ImageSample>& samples,
                    data::Split split);

// Loads the checkpoints (the localizer path may be empty) and evaluates.
// Missing files raise DependencyError.
EvalReport evaluate_checkpoints(const std::filesystem::path& counter_ckpt,
                                const std::filesystem::path& localizer_ckpt,
                                const std::vector<data::ImageSample>& samples,
                                data::Split split);

// Mean absolute deviation of the labels around their own mean, i.e. the MAE
// of a constant predictor that always answers the label mean.
double mean_predictor_mae(std::span<const double> labels);

struct AblationRun {
  std::uint64_t seed = 0;
  EvalReport without_gmp;
  EvalReport full;
  std::string data_order_hash;
  std::filesystem::path without_dir, full_dir;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  double without_mae = 0.0, without_mse = 0.0;
  double full_mae = 0.0, full_mse = 0.0;
  // (without - full) / without * 100
  double mae_improvement = 0.0, mse_improvement = 0.0;
  std::string dataset_name;

  std::string summary_csv() const;
  std::string per_seed_csv() const;
};

double improvement_percent(double without, double full);

// Trains the two counter variants with identical seeds and data order and
// scores both on the test split. The configs must differ only in
// counter.gmp_enabled (true for full, false for without).
AblationResult run_ablation(const ExperimentConfig& full,
                            const ExperimentConfig& without,
                            const std::vector<data::ImageSample>& samples,
                            const std::vector<std::uint64_t>& seeds,
                            const std::filesystem::path& out_dir,
                            bool verbose = false);

struct VisualPanel {
  cv::Mat canvas;  // CV_8UC3, 4 panels side by side
  std::string count_text;
};

// Panels: input, coarse map, fine map, predicted dots over the input. Heat maps
// are normalized by their own maximum. The count printed is ‖coarse‖₁.
VisualPanel render_visuals(const cv::Mat& image, const Tensor& coarse,
                           const cv::Mat& fine, const data::DotAnnotation& dots);
VisualPanel export_visuals(const cv::Mat& image, const Tensor& coarse,
                           const cv::Mat& fine, const data::DotAnnotation& dots,
                           const std::filesystem::path& png_path);

}  // namespace dcount::eval
