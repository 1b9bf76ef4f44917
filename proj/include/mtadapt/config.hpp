#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "mtadapt/model.hpp"
#include "mtadapt/tasks.hpp"
#include "mtadapt/train.hpp"

namespace mtadapt {

struct TaskConfig {
  std::string kind = "bracket";  // bracket | pair
  std::size_t n_train = 4000;
  std::size_t n_val = 500;
  std::size_t n_test = 500;
  std::size_t seq_len = 16;
  double imbalance = 0.68;  // bracket positives fraction

  void validate() const;
};

/// One experiment definition: model, adapter placement, training schedule,
/// task generator and the seed protocol. Parsed from JSON with unknown keys
/// rejected; canonical_text() is the sorted-key serialization used for
/// hashing and for embedding in checkpoints.
struct ExperimentConfig {
  ModelSpec model;
  AdapterConfig adapter;
  PlacementProfile profile = PlacementProfile::kNlu;
  std::string merged_channels = "qkv";  // NLG-profile enabled set
  bool train_head = true;
  bool train_layer_norm = false;
  bool freeze_all = false;  // negative control, profile none only
  TrainConfig train;
  TaskConfig task;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string report = "median";  // headline statistic: median | mean

  void validate() const;
};

ExperimentConfig parse_experiment_config(const nlohmann::json& j);
nlohmann::json experiment_to_json(const ExperimentConfig& c);
std::string canonical_config_text(const ExperimentConfig& c);
ExperimentConfig load_config_file(const std::string& path);

/// Seeded model for one run: build, set trainability flags, attach adapters
/// per profile. Streams derive from `seed`.
Model build_experiment_model(const ExperimentConfig& c, std::uint64_t seed);

/// Seeded dataset for one run.
Dataset build_experiment_dataset(const ExperimentConfig& c, std::uint64_t seed);

}  // namespace mtadapt
