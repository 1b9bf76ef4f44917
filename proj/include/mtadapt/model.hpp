#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mtadapt/adapter.hpp"
#include "mtadapt/matrix.hpp"
#include "mtadapt/merged_qkv.hpp"
#include "mtadapt/rng.hpp"

namespace mtadapt {

enum class HeadKind { kClassifier, kLm };

struct ModelSpec {
  std::size_t vocab_size = 32;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 2;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 32;
  bool fused_qkv = false;
  HeadKind head_kind = HeadKind::kClassifier;
  std::size_t n_classes = 2;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct TensorEntry {
  Matrix value;
  bool trainable = true;
  bool decay = true;  // weight-decay eligibility (layer norms and biases opt out)
};

struct TrainableRef {
  std::string name;
  Matrix* value;
  bool decay;
};

/// Pre-norm transformer with named dense parameter matrices:
///   embed.tok (d x vocab), embed.pos (d x max_seq_len),
///   block{i}.W_q/.W_k/.W_v (d x d) or block{i}.W_qkv (3d x d) when fused,
///   block{i}.W_o (d x d, attention output projection),
///   block{i}.W_m (d_ff x d, FFN up-projection),
///   block{i}.W_f (d x d_ff, FFN down-projection),
///   block{i}.ln1/.ln2 and ln_f gains/biases (d x 1),
///   head.W, head.b.
/// Fused QKV row layout is rows [0,d) = q, [d,2d) = k, [2d,3d) = v.
///
/// Adapters attach per site (site = the weight tensor's name). Once any
/// adapter is attached every base tensor is frozen; the head stays trainable
/// unless train_head is cleared, layer norms stay frozen unless
/// train_layer_norm is set. Adapter tensors appear under
/// "{site}.adapter.{A,B,C,D}" and "{site}.merged.{A,C,D,B0,B1,B2}".
struct Model {
  ModelSpec spec;
  std::map<std::string, TensorEntry> tensors;
  std::map<std::string, AdapterParams> adapters;
  std::map<std::string, MergedAdapterParams> merged_adapters;
  bool merged = false;  // deltas folded into base weights, adapter paths inactive
  bool train_head = true;
  bool train_layer_norm = false;

  bool has_adapters() const { return !adapters.empty() || !merged_adapters.empty(); }

  Matrix& param(const std::string& name);
  const Matrix& param(const std::string& name) const;

  /// Lookup by full tensor name, adapter names included
  /// ("block0.W_q.adapter.A", "block0.W_qkv.merged.B1"). Null when absent.
  Matrix* tensor_ptr(const std::string& name);

  /// Mutable views of every trainable tensor, adapter factors included
  /// (excluded once merged). Deterministic order.
  std::vector<TrainableRef> trainable_tensors();

  /// (name, tensor) pairs in deterministic order; adapter tensors included
  /// unless include_adapters is false.
  std::vector<std::pair<std::string, const Matrix*>> named_tensors(bool include_adapters) const;

  std::size_t total_param_count() const;
  std::size_t trainable_param_count() const;
};

Model build_model(const ModelSpec& spec, Rng& rng);

/// Skeleton with zero-filled tensors, for checkpoint loading.
Model build_model_uninitialized(const ModelSpec& spec);

/// Numerically stable row softmax (max subtraction). With `causal`, entries
/// j > i are masked to exactly zero.
Matrix softmax_rows(const Matrix& scores, bool causal);

struct Batch {
  std::vector<std::vector<int>> tokens;  // equal lengths within a batch
  std::vector<int> labels;               // classifier targets; unused for lm
};

struct LayerNormCache {
  Matrix x_hat;
  std::vector<double> inv_sigma;
};

struct BlockCache {
  Matrix x_in;
  LayerNormCache ln1;
  Matrix n1;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // softmax rows per (seq, head), index b * n_heads + h
  Matrix ctx;
  Matrix x2;
  LayerNormCache ln2;
  Matrix n2;
  Matrix ffn_pre;
  Matrix h;
};

/// Everything backward needs; produced by forward.
struct ForwardCache {
  RunMode mode = RunMode::kEval;
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<std::vector<int>> tokens;
  Matrix embedded;
  std::vector<BlockCache> blocks;
  LayerNormCache ln_f;
  Matrix n_f;
  Matrix head_in;
  std::map<std::string, AdapterForwardCache> adapter_caches;  // by site
};

struct ForwardResult {
  /// classifier: n_classes x batch; lm: vocab x (batch * seq_len),
  /// columns grouped by sequence.
  Matrix logits;
  std::shared_ptr<ForwardCache> cache;
};

/// Runs the model. Training mode caches intermediates and applies adapter
/// dropout (when configured) from dropout_rng. The LM head applies a causal
/// attention mask; the classifier head attends bidirectionally and reads the
/// first-position representation.
ForwardResult forward(const Model& model, const Batch& batch, RunMode mode,
                      Rng* dropout_rng = nullptr);

/// Gradients for every trainable tensor given dL/dlogits. Frozen tensors get
/// no entry. Requires the cache produced by a training-mode forward.
std::map<std::string, Matrix> backward(const Model& model, const ForwardResult& fwd,
                                       const Matrix& dlogits);

enum class PlacementProfile { kNlu, kNlg, kNone };

PlacementProfile parse_profile(const std::string& name);
const char* profile_name(PlacementProfile p);

/// Attach one adapter at a named weight site ("block0.W_q", "block1.W_f", ...).
/// The first attachment freezes every base tensor (head/layer-norm flags on
/// the model decide the exceptions). Attaching twice to one site is an error.
void attach_adapter(Model& model, const std::string& site, const AdapterConfig& config, Rng& rng);

/// Attach the stepwise-convolution adapter to a fused block{i}.W_qkv site.
void attach_merged_adapter(Model& model, std::size_t block, const AdapterConfig& config,
                           std::vector<QkvChannel> enabled, Rng& rng);

/// Paper placements: NLU = {W_q, W_v, W_m, W_o} per block (separate QKV);
/// NLG = merged {q,k,v} on W_qkv plus W_f per block (fused QKV).
void attach_adapters(Model& model, PlacementProfile profile, const AdapterConfig& config,
                     Rng& rng);

/// Fold every adapter's delta into its base weight; adapter paths go
/// inactive. Merging twice without unmerge is an error.
void merge_all(Model& model);

/// Subtract the deltas back out, restoring the unmerged baseline.
void unmerge_all(Model& model);

}  // namespace mtadapt
