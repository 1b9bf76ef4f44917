#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "mtadapt/matrix.hpp"
#include "mtadapt/rng.hpp"

namespace mtadapt {

/// The transformation structure realized between B and A.
///
///   kLora: none (identity)         dW = s * B A
///   kShim: free matrix C           dW = s * B C A
///   kIcfm: Gram form C C^T         dW = s * B (C C^T) A
///   kCtcm: product C D             dW = s * B (C D) A
///   kDtsm: sum C + D               dW = s * B (C + D) A
///
/// with s = alpha / rank.
enum class AdapterVariant { kLora, kShim, kIcfm, kCtcm, kDtsm };

const char* variant_name(AdapterVariant v);
AdapterVariant parse_variant(const std::string& name);
bool variant_has_c(AdapterVariant v);
bool variant_has_d(AdapterVariant v);

struct AdapterConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  AdapterVariant variant = AdapterVariant::kLora;
  double init_std = 0.02;
  double dropout_prob = 0.0;  // adapter-input dropout, training mode only

  double scaling() const { return alpha / static_cast<double>(rank); }
  void validate() const;
};

/// Trainable factors for one adapted d x k layer.
/// A is r x k, B is d x r; C and D are r x r and present per variant.
/// After init, B is exactly zero and A (and C, D) are Gaussian, so a fresh
/// adapter contributes nothing to the host layer.
struct AdapterParams {
  Matrix A;
  Matrix B;
  std::optional<Matrix> C;
  std::optional<Matrix> D;
  AdapterConfig config;

  std::size_t out_dim() const { return B.rows(); }  // d
  std::size_t in_dim() const { return A.cols(); }   // k
  std::size_t rank() const { return A.rows(); }     // r
};

struct AdapterGrads {
  Matrix dA;
  Matrix dB;
  std::optional<Matrix> dC;
  std::optional<Matrix> dD;
};

enum class RunMode { kTrain, kEval };

/// Adapter-path intermediates kept for the backward pass.
/// x_used is the input actually fed to A (post-dropout in training mode);
/// dropout_scale holds the inverted-dropout factors (entries 0 or 1/(1-p)).
struct AdapterForwardCache {
  Matrix x_used;
  Matrix dropout_scale;  // empty when dropout was off
};

AdapterParams init_adapter(const AdapterConfig& config, std::size_t d, std::size_t k, Rng& rng);

/// The r x r matrix M realizing the variant's transformation T.
Matrix transform(const AdapterParams& params);

// Shared with the merged-QKV adapter, which realizes the same structures at
// size r*|E|.
Matrix realize_transform(AdapterVariant variant, const std::optional<Matrix>& C,
                         const std::optional<Matrix>& D, std::size_t r);
void transform_grads(AdapterVariant variant, const Matrix& g_m, const std::optional<Matrix>& C,
                     const std::optional<Matrix>& D, std::optional<Matrix>& dC,
                     std::optional<Matrix>& dD);

/// s * B M A x, eval mode (no dropout).
Matrix forward_adapter(const AdapterParams& params, const Matrix& x);

/// Training-mode forward. When dropout is enabled (p > 0 and mode == kTrain),
/// the adapter-path input is masked with inverted scaling 1/(1-p) before A;
/// the base path of the host layer is unaffected. `cache`, when given,
/// receives what backward_adapter needs.
Matrix forward_adapter(const AdapterParams& params, const Matrix& x, RunMode mode,
                       Rng* dropout_rng, AdapterForwardCache* cache);

/// dW = s * B M A (d x k). Folding this into W0 reproduces the adapter path
/// exactly (dropout off).
Matrix delta_weight(const AdapterParams& params);

/// Analytic gradients for a loss with upstream gradient g = dL/dy (d x n),
/// where y = forward_adapter(params, x). `x` must be the input that actually
/// reached A (cache.x_used when dropout was active).
AdapterGrads backward_adapter(const AdapterParams& params, const Matrix& x, const Matrix& g);

/// Gradient through the adapter path to its input: s * A^T M^T B^T g (k x n).
/// Dropout mask application is the caller's job (hadamard with dropout_scale).
Matrix adapter_input_grad(const AdapterParams& params, const Matrix& g);

/// Stored trainable entries for the variant: r(d+k), +r^2 for SHIM/ICFM,
/// +2r^2 for CTCM/DTSM.
std::size_t param_count(const AdapterConfig& config, std::size_t d, std::size_t k);

}  // namespace mtadapt
