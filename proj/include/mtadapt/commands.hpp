#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "mtadapt/config.hpp"
#include "mtadapt/gradcheck.hpp"

namespace mtadapt {

struct SeedRunResult {
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  double test_mcc = 0.0;
  double best_val_metric = 0.0;
  std::size_t best_epoch = 0;
  std::string checkpoint_path;
};

struct MetricAggregate {
  std::vector<double> values;  // per seed, in seed order
  double median = 0.0;
  double mean = 0.0;
  double std_dev = 0.0;  // population std over the seed values
};

MetricAggregate aggregate_metric(const std::vector<double>& values);

struct TrainReport {
  std::vector<SeedRunResult> runs;
  MetricAggregate accuracy;
  MetricAggregate mcc;
  std::string headline_metric;  // "mcc" for binary tasks
  std::string headline_stat;    // "median" | "mean"
  double headline_value = 0.0;
  double headline_std = 0.0;
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
};

/// One training run per seed; writes seed{N}.ckpt and seed{N}.trace.jsonl
/// plus report.json / report.txt under out_dir. Deterministic: rerunning an
/// identical config reproduces every output byte.
TrainReport run_train(const ExperimentConfig& config, const std::string& out_dir,
                      std::ostream& log);

struct EvalReport {
  double accuracy = 0.0;
  double mcc = 0.0;
  std::size_t count = 0;
};

/// Rebuilds the checkpoint's task (from its embedded config) and evaluates
/// the test split.
EvalReport run_eval(const std::string& checkpoint_path, std::ostream& log);

/// Folds adapter deltas into base weights and writes an adapter-free
/// checkpoint. Merging an already-merged checkpoint is an error.
void run_merge(const std::string& checkpoint_in, const std::string& checkpoint_out,
               std::ostream& log);

struct SweepCell {
  std::string variant;
  std::size_t rank = 0;
  std::size_t trainable_params = 0;
  double headline_value = 0.0;
  double headline_std = 0.0;
  bool ok = false;
  std::string error;
};

struct SweepReport {
  std::vector<SweepCell> cells;
};

/// One aggregate per (variant, rank); failures are recorded in the cell and
/// the sweep continues. Writes sweep.txt and sweep.jsonl under out_dir.
SweepReport run_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& ranks,
                      const std::vector<AdapterVariant>& variants, const std::string& out_dir,
                      std::ostream& log);

/// Per-site adapter parameter counts and the trainable fraction.
void run_param_count(const ExperimentConfig& config, std::ostream& out);

}  // namespace mtadapt
