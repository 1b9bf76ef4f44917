#include "mtadapt/merged_qkv.hpp"

#include <algorithm>
#include <string>

namespace mtadapt {

namespace {

Matrix slice_rows(const Matrix& m, std::size_t r0, std::size_t r1) {
  Matrix out(r1 - r0, m.cols());
  for (std::size_t i = r0; i < r1; ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      out(i - r0, j) = m(i, j);
    }
  }
  return out;
}

void add_into_rows(Matrix& dst, std::size_t r0, const Matrix& src) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    for (std::size_t j = 0; j < src.cols(); ++j) {
      dst(r0 + i, j) += src(i, j);
    }
  }
}

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

const char* channel_name(QkvChannel c) {
  switch (c) {
    case QkvChannel::kQ: return "q";
    case QkvChannel::kK: return "k";
    case QkvChannel::kV: return "v";
  }
  return "?";
}

std::vector<QkvChannel> parse_channels(const std::string& s) {
  std::vector<QkvChannel> out;
  for (char c : s) {
    switch (c) {
      case 'q': out.push_back(QkvChannel::kQ); break;
      case 'k': out.push_back(QkvChannel::kK); break;
      case 'v': out.push_back(QkvChannel::kV); break;
      default:
        throw ConfigError(std::string("unknown qkv channel '") + c + "'");
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

MergedAdapterParams init_merged(const AdapterConfig& config, std::size_t d, std::size_t k,
                                std::vector<QkvChannel> enabled, Rng& rng) {
  config.validate();
  if (enabled.empty()) {
    throw ConfigError("merged adapter: enabled channel set must be nonempty");
  }
  std::sort(enabled.begin(), enabled.end());
  if (std::adjacent_find(enabled.begin(), enabled.end()) != enabled.end()) {
    throw ConfigError("merged adapter: duplicate enabled channel");
  }
  const std::size_t e = enabled.size();
  const std::size_t joint = config.rank * e;
  if (joint >= std::min(d * e, k)) {
    throw ConfigError("merged adapter: joint rank " + std::to_string(joint) +
                      " must be smaller than min(d*|E|, k) = " +
                      std::to_string(std::min(d * e, k)));
  }
  MergedAdapterParams p;
  p.enabled = std::move(enabled);
  p.config = config;
  p.d = d;
  p.k = k;
  p.A = gaussian(rng, joint, k, config.init_std);
  if (variant_has_c(config.variant)) {
    p.C = gaussian(rng, joint, joint, config.init_std);
  }
  if (variant_has_d(config.variant)) {
    p.D = gaussian(rng, joint, joint, config.init_std);
  }
  for (std::size_t i = 0; i < e; ++i) {
    p.B_blocks.push_back(Matrix::zeros(d, config.rank));
  }
  return p;
}

Matrix merged_transform(const MergedAdapterParams& params) {
  return realize_transform(params.config.variant, params.C, params.D, params.joint_rank());
}

Matrix forward_merged(const MergedAdapterParams& params, const Matrix& x) {
  return forward_merged(params, x, RunMode::kEval, nullptr, nullptr);
}

Matrix forward_merged(const MergedAdapterParams& params, const Matrix& x, RunMode mode,
                      Rng* dropout_rng, AdapterForwardCache* cache) {
  if (x.rows() != params.k) {
    throw ShapeError("forward_merged: x has " + std::to_string(x.rows()) +
                     " rows, adapter expects " + std::to_string(params.k));
  }
  Matrix x_used = x;
  Matrix dropout_scale;
  if (mode == RunMode::kTrain && params.config.dropout_prob > 0.0) {
    if (dropout_rng == nullptr) {
      throw ConfigError("forward_merged: dropout enabled but no rng supplied");
    }
    x_used = apply_dropout(x, params.config.dropout_prob, *dropout_rng, dropout_scale);
  }
  const double s = params.config.scaling();
  const std::size_t r = params.config.rank;
  const Matrix a_prime = matmul(merged_transform(params), params.A);  // (r|E|) x k
  Matrix out = Matrix::zeros(3 * params.d, x.cols());
  for (std::size_t i = 0; i < params.n_enabled(); ++i) {
    const Matrix a_i = slice_rows(a_prime, i * r, (i + 1) * r);
    const Matrix contrib = scale(matmul(params.B_blocks[i], matmul(a_i, x_used)), s);
    const std::size_t row0 = static_cast<std::size_t>(params.enabled[i]) * params.d;
    add_into_rows(out, row0, contrib);
  }
  if (cache != nullptr) {
    cache->x_used = std::move(x_used);
    cache->dropout_scale = std::move(dropout_scale);
  }
  return out;
}

Matrix delta_weight_merged(const MergedAdapterParams& params) {
  const double s = params.config.scaling();
  const std::size_t r = params.config.rank;
  const Matrix a_prime = matmul(merged_transform(params), params.A);
  Matrix dw = Matrix::zeros(3 * params.d, params.k);
  for (std::size_t i = 0; i < params.n_enabled(); ++i) {
    const Matrix a_i = slice_rows(a_prime, i * r, (i + 1) * r);
    const Matrix block = scale(matmul(params.B_blocks[i], a_i), s);
    const std::size_t row0 = static_cast<std::size_t>(params.enabled[i]) * params.d;
    add_into_rows(dw, row0, block);
  }
  return dw;
}

MergedAdapterGrads backward_merged(const MergedAdapterParams& params, const Matrix& x,
                                   const Matrix& g) {
  if (g.rows() != 3 * params.d || x.rows() != params.k || g.cols() != x.cols()) {
    throw ShapeError("backward_merged: got x " + std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()) + ", g " + std::to_string(g.rows()) + "x" +
                     std::to_string(g.cols()) + " for a fused " + std::to_string(3 * params.d) +
                     "x" + std::to_string(params.k) + " host");
  }
  const double s = params.config.scaling();
  const std::size_t r = params.config.rank;
  const Matrix m_t = merged_transform(params);
  const Matrix a_prime = matmul(m_t, params.A);

  MergedAdapterGrads grads;
  Matrix d_a_prime = Matrix::zeros(a_prime.rows(), a_prime.cols());
  for (std::size_t i = 0; i < params.n_enabled(); ++i) {
    const std::size_t row0 = static_cast<std::size_t>(params.enabled[i]) * params.d;
    const Matrix g_i = slice_rows(g, row0, row0 + params.d);             // d x n
    const Matrix a_i = slice_rows(a_prime, i * r, (i + 1) * r);          // r x k
    grads.dB_blocks.push_back(scale(matmul(g_i, transpose(matmul(a_i, x))), s));
    const Matrix d_ai = scale(matmul(matmul(transpose(params.B_blocks[i]), g_i), transpose(x)), s);
    add_into_rows(d_a_prime, i * r, d_ai);
  }
  grads.dA = matmul(transpose(m_t), d_a_prime);
  const Matrix g_m = matmul(d_a_prime, transpose(params.A));
  transform_grads(params.config.variant, g_m, params.C, params.D, grads.dC, grads.dD);
  return grads;
}

Matrix merged_input_grad(const MergedAdapterParams& params, const Matrix& g) {
  const double s = params.config.scaling();
  const std::size_t r = params.config.rank;
  const Matrix m_t = merged_transform(params);
  const Matrix a_prime = matmul(m_t, params.A);
  Matrix dx = Matrix::zeros(params.k, g.cols());
  for (std::size_t i = 0; i < params.n_enabled(); ++i) {
    const std::size_t row0 = static_cast<std::size_t>(params.enabled[i]) * params.d;
    const Matrix g_i = slice_rows(g, row0, row0 + params.d);
    const Matrix a_i = slice_rows(a_prime, i * r, (i + 1) * r);
    dx = add(dx, scale(matmul(transpose(a_i), matmul(transpose(params.B_blocks[i]), g_i)), s));
  }
  return dx;
}

std::size_t param_count_merged(const AdapterConfig& config, std::size_t d, std::size_t k,
                               std::size_t n_enabled) {
  config.validate();
  if (n_enabled == 0) throw ConfigError("merged adapter: enabled set must be nonempty");
  const std::size_t joint = config.rank * n_enabled;
  std::size_t count = joint * k + n_enabled * d * config.rank;
  if (variant_has_c(config.variant)) count += joint * joint;
  if (variant_has_d(config.variant)) count += joint * joint;
  return count;
}

}  // namespace mtadapt
