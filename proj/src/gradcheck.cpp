#include "mtadapt/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <map>
#include <ostream>

#include "mtadapt/merged_qkv.hpp"
#include "mtadapt/model.hpp"
#include "mtadapt/train.hpp"

namespace mtadapt {

namespace {

double rel_err(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max(1e-6, std::abs(analytic) + std::abs(fd));
}

// Central differences of `loss` with respect to every entry of `param`.
Matrix fd_gradient(Matrix& param, const std::function<double()>& loss, double h) {
  Matrix g(param.rows(), param.cols());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double orig = param.data()[i];
    param.data()[i] = orig + h;
    const double lp = loss();
    param.data()[i] = orig - h;
    const double lm = loss();
    param.data()[i] = orig;
    g.data()[i] = (lp - lm) / (2.0 * h);
  }
  return g;
}

double max_rel_err(const Matrix& analytic, const Matrix& fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, rel_err(analytic.data()[i], fd.data()[i]));
  }
  return worst;
}

struct RowAccum {
  std::map<std::string, double> worst;  // tensor label -> max rel err
  void update(const std::string& tensor, double err) {
    auto it = worst.find(tensor);
    if (it == worst.end()) {
      worst.emplace(tensor, err);
    } else {
      it->second = std::max(it->second, err);
    }
  }
};

void maybe_corrupt(const GradCheckOptions& o, const std::string& tensor, Matrix& analytic) {
  if (!o.corrupt_tensor.empty() && tensor == o.corrupt_tensor && analytic.size() > 0) {
    analytic.data()[0] += o.corrupt_eps;
  }
}

void check_adapter_variant(const GradCheckOptions& o, AdapterVariant variant, Rng& rng,
                           RowAccum& acc) {
  for (int c = 0; c < o.cases_per_component; ++c) {
    const std::size_t r = 1 + rng.below(3);
    const std::size_t d = r + 2 + rng.below(5);
    const std::size_t k = r + 2 + rng.below(5);
    const std::size_t n = 1 + rng.below(4);
    AdapterConfig config;
    config.rank = r;
    config.alpha = 2.0 + static_cast<double>(rng.below(30));
    config.variant = variant;
    config.init_std = 0.5;
    AdapterParams params = init_adapter(config, d, k, rng);
    params.B = gaussian(rng, d, r, 0.5);  // zero-init B would zero most gradients
    Matrix x = gaussian(rng, k, n, 1.0);

    auto loss = [&]() {
      const Matrix y = forward_adapter(params, x);
      return 0.5 * frobenius_norm(y) * frobenius_norm(y);
    };
    const Matrix y = forward_adapter(params, x);
    AdapterGrads grads = backward_adapter(params, x, y);  // dL/dy = y for this loss

    maybe_corrupt(o, "A", grads.dA);
    maybe_corrupt(o, "B", grads.dB);
    acc.update("A", max_rel_err(grads.dA, fd_gradient(params.A, loss, o.h)));
    acc.update("B", max_rel_err(grads.dB, fd_gradient(params.B, loss, o.h)));
    if (grads.dC) {
      maybe_corrupt(o, "C", *grads.dC);
      acc.update("C", max_rel_err(*grads.dC, fd_gradient(*params.C, loss, o.h)));
    }
    if (grads.dD) {
      maybe_corrupt(o, "D", *grads.dD);
      acc.update("D", max_rel_err(*grads.dD, fd_gradient(*params.D, loss, o.h)));
    }
  }
}

void check_merged(const GradCheckOptions& o, std::size_t n_enabled, Rng& rng, RowAccum& acc) {
  static const std::vector<std::vector<QkvChannel>> subsets = {
      {QkvChannel::kQ},
      {QkvChannel::kQ, QkvChannel::kV},
      {QkvChannel::kQ, QkvChannel::kK, QkvChannel::kV},
  };
  const AdapterVariant variants[5] = {AdapterVariant::kLora, AdapterVariant::kShim,
                                      AdapterVariant::kIcfm, AdapterVariant::kCtcm,
                                      AdapterVariant::kDtsm};
  for (int c = 0; c < o.cases_per_component; ++c) {
    AdapterConfig config;
    config.rank = 1 + rng.below(2);
    config.alpha = 4.0;
    config.variant = o.only_variant ? *o.only_variant : variants[rng.below(5)];
    config.init_std = 0.5;
    const std::size_t d = 3 + rng.below(3);
    const std::size_t k = config.rank * n_enabled + 2 + rng.below(4);
    const std::size_t n = 1 + rng.below(3);
    MergedAdapterParams params = init_merged(config, d, k, subsets[n_enabled - 1], rng);
    for (auto& b : params.B_blocks) b = gaussian(rng, d, config.rank, 0.5);
    Matrix x = gaussian(rng, k, n, 1.0);

    auto loss = [&]() {
      const Matrix y = forward_merged(params, x);
      return 0.5 * frobenius_norm(y) * frobenius_norm(y);
    };
    const Matrix y = forward_merged(params, x);
    MergedAdapterGrads grads = backward_merged(params, x, y);

    maybe_corrupt(o, "A", grads.dA);
    acc.update("A", max_rel_err(grads.dA, fd_gradient(params.A, loss, o.h)));
    for (std::size_t i = 0; i < grads.dB_blocks.size(); ++i) {
      const std::string label = "B" + std::to_string(i);
      maybe_corrupt(o, label, grads.dB_blocks[i]);
      acc.update(label, max_rel_err(grads.dB_blocks[i],
                                    fd_gradient(params.B_blocks[i], loss, o.h)));
    }
    if (grads.dC) {
      maybe_corrupt(o, "C", *grads.dC);
      acc.update("C", max_rel_err(*grads.dC, fd_gradient(*params.C, loss, o.h)));
    }
    if (grads.dD) {
      maybe_corrupt(o, "D", *grads.dD);
      acc.update("D", max_rel_err(*grads.dD, fd_gradient(*params.D, loss, o.h)));
    }
  }
}

void check_full_model(const GradCheckOptions& o, PlacementProfile profile, Rng& rng,
                      RowAccum& acc) {
  ModelSpec spec;
  spec.vocab_size = 12;
  spec.d_model = 8;
  spec.n_heads = 2;
  spec.n_blocks = 2;
  spec.d_ff = 12;
  spec.max_seq_len = 8;
  spec.fused_qkv = profile == PlacementProfile::kNlg;
  spec.head_kind = profile == PlacementProfile::kNlg ? HeadKind::kLm : HeadKind::kClassifier;

  AdapterConfig config;
  config.rank = 2;
  config.alpha = 4.0;
  config.variant = o.only_variant.value_or(AdapterVariant::kShim);
  config.init_std = 0.2;

  Rng init_rng = rng.derive(rng.below(1u << 30));
  Model model = build_model(spec, init_rng);
  attach_adapters(model, profile, config, init_rng);
  // Randomize B so every gradient path carries signal.
  for (auto& [site, p] : model.adapters) {
    p.B = gaussian(init_rng, p.B.rows(), p.B.cols(), 0.3);
  }
  for (auto& [site, p] : model.merged_adapters) {
    for (auto& b : p.B_blocks) b = gaussian(init_rng, b.rows(), b.cols(), 0.3);
  }

  Batch batch;
  const std::size_t len = 5, bsz = 3;
  for (std::size_t b = 0; b < bsz; ++b) {
    std::vector<int> seq;
    for (std::size_t t = 0; t < len; ++t) {
      seq.push_back(static_cast<int>(init_rng.below(spec.vocab_size)));
    }
    batch.tokens.push_back(seq);
    batch.labels.push_back(static_cast<int>(init_rng.below(2)));
  }
  auto targets = [&]() -> std::vector<int> {
    if (spec.head_kind == HeadKind::kClassifier) return batch.labels;
    std::vector<int> t;
    for (const auto& seq : batch.tokens) {
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) t.push_back(seq[i + 1]);
      t.push_back(-1);
    }
    return t;
  }();

  auto loss = [&]() {
    const ForwardResult fwd = forward(model, batch, RunMode::kEval);
    return cross_entropy(fwd.logits, targets, 0.0).loss;
  };
  const ForwardResult fwd = forward(model, batch, RunMode::kTrain);
  const CrossEntropyResult ce = cross_entropy(fwd.logits, targets, 0.0);
  std::map<std::string, Matrix> grads = backward(model, fwd, ce.dlogits);

  for (TrainableRef ref : model.trainable_tensors()) {
    auto git = grads.find(ref.name);
    if (git == grads.end()) continue;
    Matrix analytic = git->second;
    maybe_corrupt(o, ref.name, analytic);
    acc.update(ref.name, max_rel_err(analytic, fd_gradient(*ref.value, loss, o.h)));
  }
}

void flush_rows(const std::string& component, const RowAccum& acc, GradCheckReport& report) {
  for (const auto& [tensor, err] : acc.worst) {
    GradCheckRow row;
    row.component = component;
    row.tensor = tensor;
    row.max_rel_err = err;
    row.pass = err <= report.tolerance;
    report.all_pass = report.all_pass && row.pass;
    report.rows.push_back(std::move(row));
  }
}

}  // namespace

GradCheckReport run_grad_checks(const GradCheckOptions& options) {
  GradCheckReport report;
  report.tolerance = options.tolerance;
  Rng rng(options.seed);

  const AdapterVariant all[5] = {AdapterVariant::kLora, AdapterVariant::kShim,
                                 AdapterVariant::kIcfm, AdapterVariant::kCtcm,
                                 AdapterVariant::kDtsm};
  for (AdapterVariant v : all) {
    if (options.only_variant && *options.only_variant != v) continue;
    RowAccum acc;
    check_adapter_variant(options, v, rng, acc);
    flush_rows(std::string("adapter/") + variant_name(v), acc, report);
  }
  for (std::size_t e = 1; e <= 3; ++e) {
    RowAccum acc;
    check_merged(options, e, rng, acc);
    flush_rows("merged/E=" + std::to_string(e), acc, report);
  }
  {
    RowAccum acc;
    check_full_model(options, PlacementProfile::kNlu, rng, acc);
    flush_rows("model/nlu", acc, report);
  }
  {
    RowAccum acc;
    check_full_model(options, PlacementProfile::kNlg, rng, acc);
    flush_rows("model/nlg", acc, report);
  }
  return report;
}

void print_grad_check_report(std::ostream& os, const GradCheckReport& report) {
  char line[160];
  std::snprintf(line, sizeof(line), "%-14s %-28s %14s  %s\n", "component", "tensor",
                "max_rel_err", "status");
  os << line;
  for (const auto& row : report.rows) {
    std::snprintf(line, sizeof(line), "%-14s %-28s %14.3e  %s\n", row.component.c_str(),
                  row.tensor.c_str(), row.max_rel_err, row.pass ? "pass" : "FAIL");
    os << line;
  }
  os << (report.all_pass ? "all gradients within " : "FAILED at tolerance ")
     << report.tolerance << "\n";
}

}  // namespace mtadapt
