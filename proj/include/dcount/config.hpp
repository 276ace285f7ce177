#pragma once

// Experiment configuration: a JSON document with one section per pipeline
// stage, optionally patched by dotted-key overrides ("train_counter.lr_max=1e-3").
// Unknown keys are rejected so typos surface as config errors.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcount/counter.hpp"
#include "dcount/data.hpp"
#include "dcount/localizer.hpp"
#include "dcount/training.hpp"

namespace dcount {

struct DataSection {
  std::string root;
  data::Preprocess preprocess = data::Preprocess::none;
  int tile = 256;
  std::uint64_t split_seed = 0;
  double sigma = data::kDefaultSigma;
  std::string images_dir = "images";
  std::string annotations_dir = "annotations";

  data::DatasetLayout layout() const {
    return {images_dir, annotations_dir, split_seed};
  }
};

struct EvalSection {
  std::string counter_checkpoint;
  std::string localizer_checkpoint;
  data::Split split = data::Split::test;
};

struct AblateSection {
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string dataset_name = "synthetic";
};

struct VizSection {
  int max_images = 4;
};

struct ExperimentConfig {
  data::SynthConfig synth;
  std::string synth_output = "data/synthetic";
  DataSection data;
  CounterConfig counter;
  LocalizerConfig localizer;
  RunConfig train_counter;
  RunConfig train_localizer;
  EvalSection eval;
  AblateSection ablate;
  VizSection viz;
  std::string output_dir = "runs";
};

nlohmann::json to_json(const data::SynthConfig& c);
nlohmann::json to_json(const CounterConfig& c);
nlohmann::json to_json(const LocalizerConfig& c);
nlohmann::json to_json(const RunConfig& c);
nlohmann::json to_json(const ExperimentConfig& c);

// Missing keys keep their defaults; wrong types or unknown keys throw
// ConfigError naming the dotted path.
ExperimentConfig parse_config(const nlohmann::json& j);

nlohmann::json load_config_file(const std::filesystem::path& path);
nlohmann::json apply_overrides(nlohmann::json doc,
                               const std::vector<std::string>& overrides);

// Short stable digest of the canonical JSON text.
std::string config_hash(const nlohmann::json& resolved);

}  // namespace dcount
