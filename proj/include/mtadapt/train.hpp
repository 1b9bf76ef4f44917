#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtadapt/model.hpp"
#include "mtadapt/tasks.hpp"

namespace mtadapt {

struct TrainConfig {
  double learning_rate = 4e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::optional<double> warmup_ratio = 0.06;  // exactly one of ratio/steps set
  std::optional<std::size_t> warmup_steps;
  double weight_decay = 0.0;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double max_grad_norm = 0.0;  // 0 disables clipping

  void validate() const;
};

struct OptimState {
  struct Moments {
    Matrix m;
    Matrix v;
  };
  std::map<std::string, Moments> moments;
  std::size_t step = 0;
};

/// One AdamW update at learning rate lr_t. Decoupled weight decay is applied
/// only to refs flagged decayable; missing grad entries count as zero.
void adamw_step(const std::vector<TrainableRef>& params,
                const std::map<std::string, Matrix>& grads, OptimState& state,
                const TrainConfig& config, double lr_t);

/// Linear warmup from 0 to lr over the warmup span, then linear decay to 0
/// at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& config);

struct CrossEntropyResult {
  double loss;     // mean over counted columns
  Matrix dlogits;  // gradient of that mean
};

/// Softmax cross-entropy over logit columns. `targets[j]` is the class id for
/// column j, or -1 to exclude the column (LM next-token padding). Label
/// smoothing distributes `smoothing` uniformly over classes.
CrossEntropyResult cross_entropy(const Matrix& logits, const std::vector<int>& targets,
                                 double smoothing);

struct TraceRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochEval {
  std::size_t epoch = 0;
  EvalMetrics metrics;
};

struct TrainResult {
  Model model;       // after the last step
  Model best_model;  // best validation metric (MCC for binary, else accuracy)
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
  std::vector<TraceRecord> trace;
  std::vector<EpochEval> evals;
};

/// Deterministic given (model, dataset, config): shuffling, dropout and every
/// other random stream derive from config.seed. A non-finite loss aborts with
/// NumericError naming the step. Per-step and per-epoch records go to
/// trace_out (line-delimited JSON) when given.
TrainResult train_loop(Model model, const Dataset& data, const TrainConfig& config,
                       std::ostream* trace_out = nullptr);

}  // namespace mtadapt
