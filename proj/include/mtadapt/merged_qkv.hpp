#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "mtadapt/adapter.hpp"
#include "mtadapt/matrix.hpp"
#include "mtadapt/rng.hpp"

namespace mtadapt {

/// Channels of a fused (3d) x k QKV weight, in its fixed row layout:
/// rows [0,d) = q, [d,2d) = k, [2d,3d) = v.
enum class QkvChannel : int { kQ = 0, kK = 1, kV = 2 };

const char* channel_name(QkvChannel c);
std::vector<QkvChannel> parse_channels(const std::string& s);  // e.g. "qv", "qkv"

/// Two-step adapter for a fused QKV projection:
///   step 1 (joint):       A' = M_T * A  - a dense (r|E|) x (r|E|) transform
///                         mixing the channel blocks of A across channels;
///   step 2 (independent): per enabled channel i, dW_i = s * B_i * A'_i,
///                         scattered into that channel's row slice.
/// Disabled channels receive exactly zero. M_T is realized from C/D by the
/// configured variant, at size r|E| (identity for LORA, which reduces the
/// whole thing to |E| independent plain adapters).
struct MergedAdapterParams {
  std::vector<QkvChannel> enabled;  // ascending, unique, nonempty
  Matrix A;                         // (r|E|) x k
  std::optional<Matrix> C;          // (r|E|) x (r|E|) per variant
  std::optional<Matrix> D;
  std::vector<Matrix> B_blocks;     // |E| blocks, each d x r
  AdapterConfig config;
  std::size_t d = 0;  // per-channel output dim; host fused weight is (3d) x k
  std::size_t k = 0;

  std::size_t n_enabled() const { return enabled.size(); }
  std::size_t joint_rank() const { return config.rank * enabled.size(); }
};

struct MergedAdapterGrads {
  Matrix dA;
  std::vector<Matrix> dB_blocks;
  std::optional<Matrix> dC;
  std::optional<Matrix> dD;
};

MergedAdapterParams init_merged(const AdapterConfig& config, std::size_t d, std::size_t k,
                                std::vector<QkvChannel> enabled, Rng& rng);

/// The (r|E|) x (r|E|) matrix M_T of the joint step.
Matrix merged_transform(const MergedAdapterParams& params);

Matrix forward_merged(const MergedAdapterParams& params, const Matrix& x);
Matrix forward_merged(const MergedAdapterParams& params, const Matrix& x, RunMode mode,
                      Rng* dropout_rng, AdapterForwardCache* cache);

/// (3d) x k increment: s * B_blockdiag * M_T * A in enabled row slices,
/// zeros elsewhere.
Matrix delta_weight_merged(const MergedAdapterParams& params);

MergedAdapterGrads backward_merged(const MergedAdapterParams& params, const Matrix& x,
                                   const Matrix& g);

/// Gradient through the adapter path to its input (k x n); dropout mask
/// application is the caller's job.
Matrix merged_input_grad(const MergedAdapterParams& params, const Matrix& g);

std::size_t param_count_merged(const AdapterConfig& config, std::size_t d, std::size_t k,
                               std::size_t n_enabled);

}  // namespace mtadapt
