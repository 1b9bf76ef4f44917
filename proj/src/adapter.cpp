#include "mtadapt/adapter.hpp"

#include <string>

namespace mtadapt {

const char* variant_name(AdapterVariant v) {
  switch (v) {
    case AdapterVariant::kLora: return "lora";
    case AdapterVariant::kShim: return "shim";
    case AdapterVariant::kIcfm: return "icfm";
    case AdapterVariant::kCtcm: return "ctcm";
    case AdapterVariant::kDtsm: return "dtsm";
  }
  return "?";
}

AdapterVariant parse_variant(const std::string& name) {
  if (name == "lora") return AdapterVariant::kLora;
  if (name == "shim") return AdapterVariant::kShim;
  if (name == "icfm") return AdapterVariant::kIcfm;
  if (name == "ctcm") return AdapterVariant::kCtcm;
  if (name == "dtsm") return AdapterVariant::kDtsm;
  throw ConfigError("unknown adapter variant '" + name +
                    "' (expected lora|shim|icfm|ctcm|dtsm)");
}

bool variant_has_c(AdapterVariant v) { return v != AdapterVariant::kLora; }

bool variant_has_d(AdapterVariant v) {
  return v == AdapterVariant::kCtcm || v == AdapterVariant::kDtsm;
}

void AdapterConfig::validate() const {
  if (rank == 0) throw ConfigError("adapter rank must be positive");
  if (!(alpha > 0.0)) throw ConfigError("adapter alpha must be positive");
  if (!(init_std > 0.0)) throw ConfigError("adapter init_std must be positive");
  if (dropout_prob < 0.0 || dropout_prob >= 1.0) {
    throw ConfigError("adapter dropout_prob must be in [0, 1)");
  }
}

AdapterParams init_adapter(const AdapterConfig& config, std::size_t d, std::size_t k, Rng& rng) {
  config.validate();
  if (config.rank >= std::min(d, k)) {
    throw ConfigError("adapter rank " + std::to_string(config.rank) +
                      " must be smaller than min(d, k) = " +
                      std::to_string(std::min(d, k)));
  }
  AdapterParams p;
  p.config = config;
  p.A = gaussian(rng, config.rank, k, config.init_std);
  p.B = Matrix::zeros(d, config.rank);
  if (variant_has_c(config.variant)) {
    p.C = gaussian(rng, config.rank, config.rank, config.init_std);
  }
  if (variant_has_d(config.variant)) {
    p.D = gaussian(rng, config.rank, config.rank, config.init_std);
  }
  return p;
}

Matrix realize_transform(AdapterVariant variant, const std::optional<Matrix>& C,
                         const std::optional<Matrix>& D, std::size_t r) {
  switch (variant) {
    case AdapterVariant::kLora:
      return Matrix::identity(r);
    case AdapterVariant::kShim:
      return *C;
    case AdapterVariant::kIcfm:
      return matmul(*C, transpose(*C));
    case AdapterVariant::kCtcm:
      return matmul(*C, *D);
    case AdapterVariant::kDtsm:
      return add(*C, *D);
  }
  throw ConfigError("realize_transform: bad variant");
}

Matrix transform(const AdapterParams& params) {
  return realize_transform(params.config.variant, params.C, params.D, params.rank());
}

void transform_grads(AdapterVariant variant, const Matrix& g_m, const std::optional<Matrix>& C,
                     const std::optional<Matrix>& D, std::optional<Matrix>& dC,
                     std::optional<Matrix>& dD) {
  switch (variant) {
    case AdapterVariant::kLora:
      break;
    case AdapterVariant::kShim:
      dC = g_m;
      break;
    case AdapterVariant::kIcfm:
      // M = C C^T, so dC = (G + G^T) C.
      dC = matmul(add(g_m, transpose(g_m)), *C);
      break;
    case AdapterVariant::kCtcm:
      dC = matmul(g_m, transpose(*D));
      dD = matmul(transpose(*C), g_m);
      break;
    case AdapterVariant::kDtsm:
      dC = g_m;
      dD = g_m;
      break;
  }
}

namespace {

Matrix apply_dropout(const Matrix& x, double p, Rng& rng, Matrix& scale_out) {
  scale_out = Matrix(x.rows(), x.cols());
  Matrix dropped(x.rows(), x.cols());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = rng.uniform() < p ? 0.0 : keep_scale;
    scale_out.data()[i] = s;
    dropped.data()[i] = x.data()[i] * s;
  }
  return dropped;
}

}  // namespace

Matrix forward_adapter(const AdapterParams& params, const Matrix& x) {
  return forward_adapter(params, x, RunMode::kEval, nullptr, nullptr);
}

Matrix forward_adapter(const AdapterParams& params, const Matrix& x, RunMode mode,
                       Rng* dropout_rng, AdapterForwardCache* cache) {
  if (x.rows() != params.in_dim()) {
    throw ShapeError("forward_adapter: x has " + std::to_string(x.rows()) +
                     " rows, adapter expects " + std::to_string(params.in_dim()));
  }
  Matrix x_used = x;
  Matrix dropout_scale;
  if (mode == RunMode::kTrain && params.config.dropout_prob > 0.0) {
    if (dropout_rng == nullptr) {
      throw ConfigError("forward_adapter: dropout enabled but no rng supplied");
    }
    x_used = apply_dropout(x, params.config.dropout_prob, *dropout_rng, dropout_scale);
  }
  const Matrix m = transform(params);
  Matrix out = matmul(params.B, matmul(m, matmul(params.A, x_used)));
  out = scale(out, params.config.scaling());
  if (cache != nullptr) {
    cache->x_used = std::move(x_used);
    cache->dropout_scale = std::move(dropout_scale);
  }
  return out;
}

Matrix delta_weight(const AdapterParams& params) {
  const Matrix m = transform(params);
  return scale(matmul(params.B, matmul(m, params.A)), params.config.scaling());
}

AdapterGrads backward_adapter(const AdapterParams& params, const Matrix& x, const Matrix& g) {
  if (g.rows() != params.out_dim() || x.rows() != params.in_dim() || g.cols() != x.cols()) {
    throw ShapeError("backward_adapter: got x " + std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()) + ", g " + std::to_string(g.rows()) + "x" +
                     std::to_string(g.cols()) + " for a " + std::to_string(params.out_dim()) +
                     "x" + std::to_string(params.in_dim()) + " adapter");
  }
  const double s = params.config.scaling();
  const Matrix m = transform(params);
  const Matrix ax = matmul(params.A, x);       // r x n
  const Matrix bt_g = matmul(transpose(params.B), g);  // r x n

  AdapterGrads grads;
  grads.dB = scale(matmul(g, transpose(matmul(m, ax))), s);
  grads.dA = scale(matmul(matmul(transpose(m), bt_g), transpose(x)), s);
  const Matrix g_m = scale(matmul(bt_g, transpose(ax)), s);
  transform_grads(params.config.variant, g_m, params.C, params.D, grads.dC, grads.dD);
  return grads;
}

Matrix adapter_input_grad(const AdapterParams& params, const Matrix& g) {
  const Matrix m = transform(params);
  return scale(
      matmul(transpose(params.A), matmul(transpose(m), matmul(transpose(params.B), g))),
      params.config.scaling());
}

std::size_t param_count(const AdapterConfig& config, std::size_t d, std::size_t k) {
  config.validate();
  const std::size_t r = config.rank;
  std::size_t count = r * (d + k);
  if (variant_has_c(config.variant)) count += r * r;
  if (variant_has_d(config.variant)) count += r * r;
  return count;
}

}  // namespace mtadapt
