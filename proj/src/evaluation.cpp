#include "dcount/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dcount/checkpoint.hpp"
#include "dcount/error.hpp"
#include "dcount/hash.hpp"
#include "dcount/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace dcount::eval {

namespace {

void check_lengths(std::span<const double> a, std::span<const double> b,
                   const char* who) {
  if (a.size() != b.size()) {
    throw InputError(std::string(who) + ": length mismatch (" +
                     std::to_string(a.size()) + " predictions vs " +
                     std::to_string(b.size()) + " labels)");
  }
  if (a.empty()) throw InputError(std::string(who) + ": no samples");
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

json number_or_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

}  // namespace

double mae(std::span<const double> preds, std::span<const double> gts) {
  check_lengths(preds, gts, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::fabs(preds[i] - gts[i]);
  return s / static_cast<double>(preds.size());
}

double mse(std::span<const double> preds, std::span<const double> gts) {
  check_lengths(preds, gts, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double d = preds[i] - gts[i];
    s += d * d;
  }
  return s / static_cast<double>(preds.size());
}

double mean_predictor_mae(std::span<const double> labels) {
  if (labels.empty()) throw InputError("mean_predictor_mae: no labels");
  double mean = 0.0;
  for (double y : labels) mean += y;
  mean /= static_cast<double>(labels.size());
  double s = 0.0;
  for (double y : labels) s += std::fabs(y - mean);
  return s / static_cast<double>(labels.size());
}

ModelPredictor::ModelPredictor(std::unique_ptr<Counter> counter,
                               std::unique_ptr<Localizer> localizer)
    : counter_(std::move(counter)), localizer_(std::move(localizer)) {
  if (!counter_) throw InputError("ModelPredictor: counter is required");
}

Prediction ModelPredictor::predict(const data::ImageSample& sample) {
  const CoarseMap coarse = counter_->infer(sample.image);
  Prediction p{coarse.count};
  if (localizer_) p.fine_sum = localizer_->infer(sample.image, coarse).total;
  return p;
}

json EvalReport::to_json() const {
  json rows_json = json::array();
  for (const EvalRow& r : rows) {
    rows_json.push_back({{"id", r.id},
                         {"tiles", r.tiles},
                         {"y", r.y},
                         {"y_hat", r.y_hat},
                         {"abs_err", r.abs_err},
                         {"fine_sum", number_or_null(r.fine_sum)}});
  }
  return {{"mae", mae}, {"mse", mse}, {"n", rows.size()}, {"meta", meta},
          {"rows", rows_json}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "id,tiles,y,y_hat,abs_err,fine_sum\n";
  for (const EvalRow& r : rows) {
    os << r.id << ',' << r.tiles << ',' << fmt(r.y) << ',' << fmt(r.y_hat) << ','
       << fmt(r.abs_err) << ',' << fmt(r.fine_sum) << '\n';
  }
  return os.str();
}

void EvalReport::write(const fs::path& dir, const std::string& stem) const {
  fs::create_directories(dir);
  write_file_atomic(dir / (stem + ".json"), to_json().dump(2) + "\n");
  write_file_atomic(dir / (stem + ".csv"), to_csv());
}

EvalReport evaluate(CountPredictor& predictor,
                    const std::vector<data::ImageSample>& samples,
                    data::Split split) {
  EvalReport report;
  std::map<std::string, std::size_t> row_of;
  for (const auto& s : samples) {
    if (s.split != split) continue;
    const std::string& parent = s.parent_id.empty() ? s.source_id : s.parent_id;
    auto [it, inserted] = row_of.try_emplace(parent, report.rows.size());
    if (inserted) {
      EvalRow r;
      r.id = parent;
      r.tiles = 0;
      r.fine_sum = 0.0;
      report.rows.push_back(r);
    }
    EvalRow& r = report.rows[it->second];
    const Prediction p = predictor.predict(s);
    r.tiles += 1;
    r.y += static_cast<double>(s.count());
    r.y_hat += p.count;
    r.fine_sum += p.fine_sum;
  }
  if (report.rows.empty()) {
    throw InputError("evaluate: split '" + data::to_string(split) + "' is empty");
  }
  std::vector<double> preds, gts;
  for (EvalRow& r : report.rows) {
    r.abs_err = std::fabs(r.y_hat - r.y);
    preds.push_back(r.y_hat);
    gts.push_back(r.y);
  }
  report.mae = mae(preds, gts);
  report.mse = mse(preds, gts);
  report.meta["split"] = data::to_string(split);
  report.meta["dataset_hash"] = data::dataset_hash(samples);
  return report;
}

EvalReport evaluate_checkpoints(const fs::path& counter_ckpt,
                                const fs::path& localizer_ckpt,
                                const std::vector<data::ImageSample>& samples,
                                data::Split split) {
  if (counter_ckpt.empty() || !fs::exists(counter_ckpt)) {
    throw DependencyError("counter checkpoint '" + counter_ckpt.string() + "' not found");
  }
  if (!localizer_ckpt.empty() && !fs::exists(localizer_ckpt)) {
    throw DependencyError("localizer checkpoint '" + localizer_ckpt.string() +
                          "' not found");
  }
  ModelPredictor predictor(Counter::load(counter_ckpt),
                           localizer_ckpt.empty() ? nullptr : Localizer::load(localizer_ckpt));
  EvalReport report = evaluate(predictor, samples, split);
  report.meta["counter_checkpoint"] = counter_ckpt.string();
  report.meta["counter_sha256"] = sha256_file(counter_ckpt);
  if (!localizer_ckpt.empty()) {
    report.meta["localizer_checkpoint"] = localizer_ckpt.string();
    report.meta["localizer_sha256"] = sha256_file(localizer_ckpt);
  }
  return report;
}

double improvement_percent(double without, double full) {
  if (without == 0.0) return 0.0;
  return (without - full) / without * 100.0;
}

std::string AblationResult::summary_csv() const {
  std::ostringstream os;
  os << "method," << dataset_name << " MAE," << dataset_name << " MSE\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "w/o GMP,%.4f,%.4f\n", without_mae, without_mse);
  os << buf;
  std::snprintf(buf, sizeof buf, "Full model,%.4f,%.4f\n", full_mae, full_mse);
  os << buf;
  std::snprintf(buf, sizeof buf, "improvement,%.1f%%,%.1f%%\n", mae_improvement,
                mse_improvement);
  os << buf;
  return os.str();
}

std::string AblationResult::per_seed_csv() const {
  std::ostringstream os;
  os << "seed,variant,mae,mse,data_order_hash\n";
  for (const AblationRun& r : runs) {
    os << r.seed << ",w/o GMP," << fmt(r.without_gmp.mae) << ','
       << fmt(r.without_gmp.mse) << ',' << r.data_order_hash << '\n';
    os << r.seed << ",Full model," << fmt(r.full.mae) << ',' << fmt(r.full.mse)
       << ',' << r.data_order_hash << '\n';
  }
  os << "mean,w/o GMP," << fmt(without_mae) << ',' << fmt(without_mse) << ",\n";
  os << "mean,Full model," << fmt(full_mae) << ',' << fmt(full_mse) << ",\n";
  return os.str();
}

AblationResult run_ablation(const ExperimentConfig& full,
                            const ExperimentConfig& without,
                            const std::vector<data::ImageSample>& samples,
                            const std::vector<std::uint64_t>& seeds,
                            const fs::path& out_dir, bool verbose) {
  if (!full.counter.gmp_enabled || without.counter.gmp_enabled) {
    throw ProtocolError(
        "run_ablation: the full config needs counter.gmp_enabled=true and the "
        "ablated config counter.gmp_enabled=false");
  }
  json a = to_json(full), b = to_json(without);
  b["counter"]["gmp_enabled"] = true;
  if (a != b) {
    const json patch = json::diff(a, b);
    throw ProtocolError("run_ablation: configs differ outside counter.gmp_enabled: " +
                        patch.dump());
  }
  if (seeds.empty()) throw ProtocolError("run_ablation: no seeds given");

  AblationResult result;
  result.dataset_name = full.ablate.dataset_name;
  for (std::uint64_t seed : seeds) {
    AblationRun run;
    run.seed = seed;
    std::string order_hash[2];
    for (int variant = 0; variant < 2; ++variant) {
      const ExperimentConfig& ec = variant == 0 ? without : full;
      RunConfig rc = ec.train_counter;
      rc.seed = seed;
      ExperimentConfig echoed = ec;
      echoed.train_counter.seed = seed;
      TrainIo io;
      io.out_dir = out_dir / ("seed" + std::to_string(seed)) /
                   (variant == 0 ? "without_gmp" : "full");
      io.resolved_config = to_json(echoed);
      io.verbose = verbose;
      if (verbose) {
        std::clog << "[ablate] seed " << seed << " "
                  << (variant == 0 ? "w/o GMP" : "full model") << "\n";
      }
      const TrainResult tr = train_counter(rc, ec.counter, samples, io);
      order_hash[variant] = tr.data_order_hash;
      EvalReport rep = evaluate_checkpoints(tr.checkpoint, {}, samples, data::Split::test);
      rep.meta["seed"] = seed;
      rep.meta["variant"] = variant == 0 ? "w/o GMP" : "Full model";
      rep.write(io.out_dir, "test_report");
      (variant == 0 ? run.without_gmp : run.full) = std::move(rep);
      (variant == 0 ? run.without_dir : run.full_dir) = io.out_dir;
    }
    if (order_hash[0] != order_hash[1]) {
      throw ProtocolError("run_ablation: paired runs saw different data orders for seed " +
                          std::to_string(seed));
    }
    run.data_order_hash = order_hash[0];
    result.runs.push_back(std::move(run));
  }
  const double n = static_cast<double>(result.runs.size());
  for (const AblationRun& r : result.runs) {
    result.without_mae += r.without_gmp.mae / n;
    result.without_mse += r.without_gmp.mse / n;
    result.full_mae += r.full.mae / n;
    result.full_mse += r.full.mse / n;
  }
  result.mae_improvement = improvement_percent(result.without_mae, result.full_mae);
  result.mse_improvement = improvement_percent(result.without_mse, result.full_mse);
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "ablation_summary.csv", result.summary_csv());
  write_file_atomic(out_dir / "ablation_per_seed.csv", result.per_seed_csv());
  return result;
}

namespace {

cv::Mat to_bgr8(const cv::Mat& image) {
  cv::Mat src = image;
  if (src.channels() == 1) cv::cvtColor(src, src, cv::COLOR_GRAY2BGR);
  cv::Mat out;
  src.convertTo(out, CV_8UC3, 255.0);
  return out;
}

cv::Mat heat(const cv::Mat& map, cv::Size size) {
  cv::Mat m;
  map.convertTo(m, CV_32F);
  double max_v = 0.0;
  cv::minMaxLoc(m, nullptr, &max_v);
  cv::Mat norm = max_v > 0.0 ? cv::Mat(m * (255.0 / max_v)) : cv::Mat::zeros(m.size(), CV_32F);
  cv::Mat u8;
  norm.convertTo(u8, CV_8U);
  if (u8.size() != size) cv::resize(u8, u8, size, 0, 0, cv::INTER_NEAREST);
  cv::Mat out;
  cv::applyColorMap(u8, out, cv::COLORMAP_JET);
  if (max_v <= 0.0) out.setTo(cv::Scalar::all(0));
  return out;
}

}  // namespace

VisualPanel render_visuals(const cv::Mat& image, const Tensor& coarse,
                           const cv::Mat& fine, const data::DotAnnotation& dots) {
  if (image.empty()) throw InputError("render_visuals: empty image");
  const cv::Size size = image.size();
  if (!fine.empty() && fine.size() != size) {
    throw ShapeError("render_visuals: fine map must match the image size");
  }
  VisualPanel v;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", l1_count(coarse, 0));
  v.count_text = buf;

  const cv::Mat input = to_bgr8(image);
  const cv::Mat coarse_panel = heat(tensor_plane_to_mat(coarse, 0, 0), size);
  const cv::Mat fine_panel =
      fine.empty() ? cv::Mat(cv::Mat::zeros(size, CV_8UC3)) : heat(fine, size);
  cv::Mat overlay = input.clone();
  for (const auto& p : dots.points) {
    cv::circle(overlay, {static_cast<int>(std::lround(p.x)), static_cast<int>(std::lround(p.y))},
               2, cv::Scalar(0, 0, 255), cv::FILLED);
  }
  const double scale = std::max(0.4, size.width / 400.0);
  int baseline = 0;
  const cv::Size text = cv::getTextSize(v.count_text, cv::FONT_HERSHEY_SIMPLEX, scale, 1, &baseline);
  cv::putText(coarse_panel, v.count_text, {4, 4 + text.height},
              cv::FONT_HERSHEY_SIMPLEX, scale, cv::Scalar(255, 255, 255), 1, cv::LINE_AA);
  cv::hconcat(std::vector<cv::Mat>{input, coarse_panel, fine_panel, overlay}, v.canvas);
  return v;
}

VisualPanel export_visuals(const cv::Mat& image, const Tensor& coarse,
                           const cv::Mat& fine, const data::DotAnnotation& dots,
                           const fs::path& png_path) {
  VisualPanel v = render_visuals(image, coarse, fine, dots);
  std::error_code ec;
  if (png_path.has_parent_path()) fs::create_directories(png_path.parent_path(), ec);
  if (ec || !cv::imwrite(png_path.string(), v.canvas)) {
    throw IoError("cannot write " + png_path.string());
  }
  return v;
}

}  // namespace dcount::eval
