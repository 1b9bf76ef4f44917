#include "mtadapt/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "json.hpp"

namespace mtadapt {

void TrainConfig::validate() const {
  if (learning_rate < 0.0) throw ConfigError("train: learning_rate must be non-negative");
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (epochs == 0) throw ConfigError("train: epochs must be positive");
  if (warmup_ratio.has_value() == warmup_steps.has_value()) {
    throw ConfigError("train: exactly one of warmup_ratio/warmup_steps must be set");
  }
  if (warmup_ratio && (*warmup_ratio < 0.0 || *warmup_ratio >= 1.0)) {
    throw ConfigError("train: warmup_ratio must be in [0, 1)");
  }
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("train: label_smoothing must be in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be non-negative");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("train: betas must be in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("train: eps must be positive");
  if (max_grad_norm < 0.0) throw ConfigError("train: max_grad_norm must be non-negative");
}

void adamw_step(const std::vector<TrainableRef>& params,
                const std::map<std::string, Matrix>& grads, OptimState& state,
                const TrainConfig& config, double lr_t) {
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (const TrainableRef& ref : params) {
    Matrix& theta = *ref.value;
    auto mit = state.moments.find(ref.name);
    if (mit == state.moments.end()) {
      mit = state.moments
                .emplace(ref.name, OptimState::Moments{Matrix::zeros(theta.rows(), theta.cols()),
                                                       Matrix::zeros(theta.rows(), theta.cols())})
                .first;
    }
    Matrix& m = mit->second.m;
    Matrix& v = mit->second.v;
    if (!m.same_shape(theta)) {
      throw ShapeError("adamw: stale moments for '" + ref.name + "'");
    }
    const Matrix* g = nullptr;
    Matrix zero;
    if (auto git = grads.find(ref.name); git != grads.end()) {
      if (!git->second.same_shape(theta)) {
        throw ShapeError("adamw: gradient shape mismatch for '" + ref.name + "'");
      }
      g = &git->second;
    } else {
      zero = Matrix::zeros(theta.rows(), theta.cols());
      g = &zero;
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g->data()[i];
      m.data()[i] = config.beta1 * m.data()[i] + (1.0 - config.beta1) * gi;
      v.data()[i] = config.beta2 * v.data()[i] + (1.0 - config.beta2) * gi * gi;
      const double m_hat = m.data()[i] / bc1;
      const double v_hat = v.data()[i] / bc2;
      theta.data()[i] -= lr_t * m_hat / (std::sqrt(v_hat) + config.eps);
      if (ref.decay && config.weight_decay > 0.0) {
        theta.data()[i] -= lr_t * config.weight_decay * theta.data()[i];
      }
    }
    check_finite(theta, "adamw update");
  }
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& config) {
  if (total_steps == 0) return 0.0;
  if (step > total_steps) step = total_steps;
  std::size_t warmup = 0;
  if (config.warmup_steps) {
    warmup = std::min(*config.warmup_steps, total_steps);
  } else if (config.warmup_ratio) {
    warmup = static_cast<std::size_t>(
        std::llround(*config.warmup_ratio * static_cast<double>(total_steps)));
  }
  const double lr = config.learning_rate;
  if (step < warmup) {
    return lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  if (total_steps == warmup) return 0.0;
  return lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup);
}

CrossEntropyResult cross_entropy(const Matrix& logits, const std::vector<int>& targets,
                                 double smoothing) {
  const std::size_t k = logits.rows();
  const std::size_t n = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " logit columns");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw ConfigError("cross_entropy: smoothing must be in [0, 1)");
  }
  std::size_t counted = 0;
  for (int t : targets) {
    if (t == -1) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= k) {
      throw ConfigError("cross_entropy: target " + std::to_string(t) + " out of range for " +
                        std::to_string(k) + " classes");
    }
    ++counted;
  }
  if (counted == 0) throw ConfigError("cross_entropy: no valid targets");

  CrossEntropyResult out;
  out.dlogits = Matrix::zeros(k, n);
  double total = 0.0;
  const double inv_count = 1.0 / static_cast<double>(counted);
  for (std::size_t j = 0; j < n; ++j) {
    if (targets[j] == -1) continue;
    const std::size_t c = static_cast<std::size_t>(targets[j]);
    double mx = logits(0, j);
    for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, logits(i, j));
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp(logits(i, j) - mx);
    const double log_denom = std::log(denom) + mx;
    double loss_j = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      const double log_p = logits(i, j) - log_denom;
      const double q = smoothing / static_cast<double>(k) + (i == c ? 1.0 - smoothing : 0.0);
      loss_j -= q * log_p;
      out.dlogits(i, j) = (std::exp(log_p) - q) * inv_count;
    }
    total += loss_j;
  }
  out.loss = total * inv_count;
  return out;
}

namespace {

std::vector<int> lm_targets(const Batch& batch) {
  std::vector<int> targets;
  for (const auto& seq : batch.tokens) {
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) targets.push_back(seq[t + 1]);
    targets.push_back(-1);  // nothing to predict at the last position
  }
  return targets;
}

void clip_gradients(std::map<std::string, Matrix>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) sq += g.data()[i] * g.data()[i];
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm || norm == 0.0) return;
  const double factor = max_norm / norm;
  for (auto& [name, g] : grads) {
    for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] *= factor;
  }
}

double primary_metric(const EvalMetrics& m, std::size_t n_classes) {
  return n_classes == 2 ? m.mcc : m.accuracy;
}

}  // namespace

TrainResult train_loop(Model model, const Dataset& data, const TrainConfig& config,
                       std::ostream* trace_out) {
  config.validate();
  if (data.train.empty()) throw ConfigError("train_loop: empty training set");

  Rng shuffle_rng = Rng(config.seed).derive(streams::kShuffle);
  Rng dropout_rng = Rng(config.seed).derive(streams::kDropout);

  const std::size_t n = data.train.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * steps_per_epoch;

  TrainResult result;
  OptimState state;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  result.best_metric = -2.0;  // below any reachable MCC/accuracy

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    shuffle(order, shuffle_rng);
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      Batch batch;
      for (std::size_t i = start; i < end; ++i) {
        batch.tokens.push_back(data.train[order[i]].tokens);
        batch.labels.push_back(data.train[order[i]].label);
      }
      const double lr_t = lr_at(state.step, total_steps, config);
      ForwardResult fwd = forward(model, batch, RunMode::kTrain, &dropout_rng);
      const std::vector<int> targets = model.spec.head_kind == HeadKind::kLm
                                           ? lm_targets(batch)
                                           : batch.labels;
      CrossEntropyResult ce = cross_entropy(fwd.logits, targets, config.label_smoothing);
      if (!std::isfinite(ce.loss)) {
        throw NumericError("train_loop: non-finite loss at step " +
                           std::to_string(state.step + 1) + " (epoch " +
                           std::to_string(epoch) + ")");
      }
      std::map<std::string, Matrix> grads = backward(model, fwd, ce.dlogits);
      if (config.max_grad_norm > 0.0) clip_gradients(grads, config.max_grad_norm);
      auto params = model.trainable_tensors();
      adamw_step(params, grads, state, config, lr_t);

      TraceRecord rec{state.step, epoch, lr_t, ce.loss};
      result.trace.push_back(rec);
      if (trace_out != nullptr) {
        nlohmann::json j;
        j["epoch"] = rec.epoch;
        j["loss"] = rec.loss;
        j["lr"] = rec.lr;
        j["step"] = rec.step;
        *trace_out << j.dump() << "\n";
      }
    }

    EpochEval ev;
    ev.epoch = epoch;
    ev.metrics = data.val.empty() ? EvalMetrics{} : evaluate(model, data.val);
    result.evals.push_back(ev);
    if (trace_out != nullptr) {
      nlohmann::json j;
      j["epoch"] = epoch;
      j["eval_accuracy"] = ev.metrics.accuracy;
      j["eval_mcc"] = ev.metrics.mcc;
      *trace_out << j.dump() << "\n";
    }
    const double metric = primary_metric(ev.metrics, data.n_classes);
    if (metric > result.best_metric) {
      result.best_metric = metric;
      result.best_epoch = epoch;
      result.best_model = model;
    }
  }

  if (result.best_epoch == 0) {
    result.best_model = model;
  }
  result.model = std::move(model);
  return result;
}

}  // namespace mtadapt
