#include "mtadapt/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mtadapt {

namespace {

constexpr double kLnEps = 1e-5;

std::string block_site(std::size_t block, const char* body) {
  return "block" + std::to_string(block) + "." + body;
}

Matrix slice_block(const Matrix& m, std::size_t r0, std::size_t r1, std::size_t c0,
                   std::size_t c1) {
  Matrix out(r1 - r0, c1 - c0);
  for (std::size_t i = r0; i < r1; ++i) {
    for (std::size_t j = c0; j < c1; ++j) {
      out(i - r0, j - c0) = m(i, j);
    }
  }
  return out;
}

void add_into_block(Matrix& dst, std::size_t r0, std::size_t c0, const Matrix& src) {
  for (std::size_t i = 0; i < src.rows(); ++i) {
    for (std::size_t j = 0; j < src.cols(); ++j) {
      dst(r0 + i, c0 + j) += src(i, j);
    }
  }
}

Matrix vstack3(const Matrix& a, const Matrix& b, const Matrix& c) {
  Matrix out(a.rows() + b.rows() + c.rows(), a.cols());
  add_into_block(out, 0, 0, a);
  add_into_block(out, a.rows(), 0, b);
  add_into_block(out, a.rows() + b.rows(), 0, c);
  return out;
}

Matrix row_sums(const Matrix& m) {
  Matrix out(m.rows(), 1);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) sum += m(i, j);
    out(i, 0) = sum;
  }
  return out;
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_slope(double x) {
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * pdf;
}

Matrix gelu(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = gelu_value(x.data()[i]);
  return y;
}

Matrix gelu_grad(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = gelu_slope(x.data()[i]);
  return y;
}

// Per-column normalization: y = gain * (x - mean) / sqrt(var + eps) + bias.
Matrix layernorm_forward(const Matrix& x, const Matrix& gain, const Matrix& bias,
                         LayerNormCache& lc) {
  const std::size_t d = x.rows(), t = x.cols();
  lc.x_hat = Matrix(d, t);
  lc.inv_sigma.assign(t, 0.0);
  Matrix y(d, t);
  for (std::size_t j = 0; j < t; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv_sigma = 1.0 / std::sqrt(var + kLnEps);
    lc.inv_sigma[j] = inv_sigma;
    for (std::size_t i = 0; i < d; ++i) {
      const double xh = (x(i, j) - mean) * inv_sigma;
      lc.x_hat(i, j) = xh;
      y(i, j) = gain(i, 0) * xh + bias(i, 0);
    }
  }
  return y;
}

Matrix layernorm_backward(const Matrix& dy, const LayerNormCache& lc, const Matrix& gain,
                          Matrix& dgain, Matrix& dbias) {
  const std::size_t d = dy.rows(), t = dy.cols();
  Matrix dx(d, t);
  dgain = Matrix::zeros(d, 1);
  dbias = Matrix::zeros(d, 1);
  for (std::size_t j = 0; j < t; ++j) {
    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double dxh = dy(i, j) * gain(i, 0);
      mean_dxh += dxh;
      mean_dxh_xh += dxh * lc.x_hat(i, j);
      dgain(i, 0) += dy(i, j) * lc.x_hat(i, j);
      dbias(i, 0) += dy(i, j);
    }
    mean_dxh /= static_cast<double>(d);
    mean_dxh_xh /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
      const double dxh = dy(i, j) * gain(i, 0);
      dx(i, j) = lc.inv_sigma[j] * (dxh - mean_dxh - lc.x_hat(i, j) * mean_dxh_xh);
    }
  }
  return dx;
}

void grads_add(std::map<std::string, Matrix>& grads, const std::string& name, Matrix g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, std::move(g));
  } else {
    it->second = add(it->second, g);
  }
}

// y = W x plus the adapter path when one is attached and not merged.
Matrix apply_site(const Model& model, const std::string& site, const Matrix& x, RunMode mode,
                  Rng* dropout_rng, ForwardCache* cache) {
  Matrix y = matmul(model.param(site), x);
  if (model.merged) return y;
  if (auto it = model.adapters.find(site); it != model.adapters.end()) {
    AdapterForwardCache ac;
    y = add(y, forward_adapter(it->second, x, mode, dropout_rng, &ac));
    if (cache != nullptr) cache->adapter_caches[site] = std::move(ac);
  } else if (auto mit = model.merged_adapters.find(site); mit != model.merged_adapters.end()) {
    AdapterForwardCache ac;
    y = add(y, forward_merged(mit->second, x, mode, dropout_rng, &ac));
    if (cache != nullptr) cache->adapter_caches[site] = std::move(ac);
  }
  return y;
}

// Input gradient of apply_site; adapter/base weight grads recorded on the way.
Matrix site_backward(const Model& model, const std::string& site, const Matrix& x,
                     const Matrix& g, const ForwardCache& cache,
                     std::map<std::string, Matrix>& grads) {
  if (model.tensors.at(site).trainable) {
    grads_add(grads, site, matmul(g, transpose(x)));
  }
  Matrix dx = matmul(transpose(model.param(site)), g);
  if (model.merged) return dx;
  if (auto it = model.adapters.find(site); it != model.adapters.end()) {
    const AdapterParams& p = it->second;
    const AdapterForwardCache& ac = cache.adapter_caches.at(site);
    AdapterGrads ag = backward_adapter(p, ac.x_used, g);
    grads_add(grads, site + ".adapter.A", std::move(ag.dA));
    grads_add(grads, site + ".adapter.B", std::move(ag.dB));
    if (ag.dC) grads_add(grads, site + ".adapter.C", std::move(*ag.dC));
    if (ag.dD) grads_add(grads, site + ".adapter.D", std::move(*ag.dD));
    Matrix gin = adapter_input_grad(p, g);
    if (!ac.dropout_scale.empty()) gin = hadamard(gin, ac.dropout_scale);
    dx = add(dx, gin);
  } else if (auto mit = model.merged_adapters.find(site); mit != model.merged_adapters.end()) {
    const MergedAdapterParams& p = mit->second;
    const AdapterForwardCache& ac = cache.adapter_caches.at(site);
    MergedAdapterGrads mg = backward_merged(p, ac.x_used, g);
    grads_add(grads, site + ".merged.A", std::move(mg.dA));
    for (std::size_t i = 0; i < mg.dB_blocks.size(); ++i) {
      grads_add(grads, site + ".merged.B" + std::to_string(i), std::move(mg.dB_blocks[i]));
    }
    if (mg.dC) grads_add(grads, site + ".merged.C", std::move(*mg.dC));
    if (mg.dD) grads_add(grads, site + ".merged.D", std::move(*mg.dD));
    Matrix gin = merged_input_grad(p, g);
    if (!ac.dropout_scale.empty()) gin = hadamard(gin, ac.dropout_scale);
    dx = add(dx, gin);
  }
  return dx;
}

void append_adapter_names(const std::string& site, const AdapterParams& p,
                          std::vector<std::pair<std::string, const Matrix*>>& out) {
  out.emplace_back(site + ".adapter.A", &p.A);
  out.emplace_back(site + ".adapter.B", &p.B);
  if (p.C) out.emplace_back(site + ".adapter.C", &*p.C);
  if (p.D) out.emplace_back(site + ".adapter.D", &*p.D);
}

void append_merged_names(const std::string& site, const MergedAdapterParams& p,
                         std::vector<std::pair<std::string, const Matrix*>>& out) {
  out.emplace_back(site + ".merged.A", &p.A);
  for (std::size_t i = 0; i < p.B_blocks.size(); ++i) {
    out.emplace_back(site + ".merged.B" + std::to_string(i), &p.B_blocks[i]);
  }
  if (p.C) out.emplace_back(site + ".merged.C", &*p.C);
  if (p.D) out.emplace_back(site + ".merged.D", &*p.D);
}

}  // namespace

void ModelSpec::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
  if (d_model == 0 || n_heads == 0 || n_blocks == 0 || d_ff == 0 || max_seq_len == 0) {
    throw ConfigError("model: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (head_kind == HeadKind::kClassifier && n_classes < 2) {
    throw ConfigError("model: classifier needs at least 2 classes");
  }
}

Matrix& Model::param(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("unknown tensor '" + name + "'");
  return it->second.value;
}

const Matrix& Model::param(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("unknown tensor '" + name + "'");
  return it->second.value;
}

Matrix* Model::tensor_ptr(const std::string& name) {
  if (auto it = tensors.find(name); it != tensors.end()) return &it->second.value;
  if (auto pos = name.find(".adapter."); pos != std::string::npos) {
    auto it = adapters.find(name.substr(0, pos));
    if (it == adapters.end()) return nullptr;
    const std::string field = name.substr(pos + 9);
    AdapterParams& p = it->second;
    if (field == "A") return &p.A;
    if (field == "B") return &p.B;
    if (field == "C" && p.C) return &*p.C;
    if (field == "D" && p.D) return &*p.D;
    return nullptr;
  }
  if (auto pos = name.find(".merged."); pos != std::string::npos) {
    auto it = merged_adapters.find(name.substr(0, pos));
    if (it == merged_adapters.end()) return nullptr;
    const std::string field = name.substr(pos + 8);
    MergedAdapterParams& p = it->second;
    if (field == "A") return &p.A;
    if (field == "C" && p.C) return &*p.C;
    if (field == "D" && p.D) return &*p.D;
    if (field.size() >= 2 && field[0] == 'B') {
      const std::size_t idx = static_cast<std::size_t>(std::stoul(field.substr(1)));
      if (idx < p.B_blocks.size()) return &p.B_blocks[idx];
    }
    return nullptr;
  }
  return nullptr;
}

std::vector<TrainableRef> Model::trainable_tensors() {
  std::vector<TrainableRef> out;
  for (auto& [name, entry] : tensors) {
    if (entry.trainable) out.push_back({name, &entry.value, entry.decay});
  }
  if (!merged) {
    for (auto& [site, p] : adapters) {
      out.push_back({site + ".adapter.A", &p.A, true});
      out.push_back({site + ".adapter.B", &p.B, true});
      if (p.C) out.push_back({site + ".adapter.C", &*p.C, true});
      if (p.D) out.push_back({site + ".adapter.D", &*p.D, true});
    }
    for (auto& [site, p] : merged_adapters) {
      out.push_back({site + ".merged.A", &p.A, true});
      for (std::size_t i = 0; i < p.B_blocks.size(); ++i) {
        out.push_back({site + ".merged.B" + std::to_string(i), &p.B_blocks[i], true});
      }
      if (p.C) out.push_back({site + ".merged.C", &*p.C, true});
      if (p.D) out.push_back({site + ".merged.D", &*p.D, true});
    }
  }
  return out;
}

std::vector<std::pair<std::string, const Matrix*>> Model::named_tensors(
    bool include_adapters) const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (const auto& [name, entry] : tensors) {
    out.emplace_back(name, &entry.value);
  }
  if (include_adapters) {
    for (const auto& [site, p] : adapters) append_adapter_names(site, p, out);
    for (const auto& [site, p] : merged_adapters) append_merged_names(site, p, out);
  }
  return out;
}

std::size_t Model::total_param_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : named_tensors(true)) n += m->size();
  return n;
}

std::size_t Model::trainable_param_count() const {
  std::size_t n = 0;
  auto& self = const_cast<Model&>(*this);
  for (const auto& ref : self.trainable_tensors()) n += ref.value->size();
  return n;
}

Model build_model_uninitialized(const ModelSpec& spec) {
  spec.validate();
  Model m;
  m.spec = spec;
  const std::size_t d = spec.d_model;
  auto put = [&m](const std::string& name, Matrix value, bool decay) {
    m.tensors.emplace(name, TensorEntry{std::move(value), true, decay});
  };
  put("embed.tok", Matrix::zeros(d, spec.vocab_size), true);
  put("embed.pos", Matrix::zeros(d, spec.max_seq_len), true);
  for (std::size_t b = 0; b < spec.n_blocks; ++b) {
    if (spec.fused_qkv) {
      put(block_site(b, "W_qkv"), Matrix::zeros(3 * d, d), true);
    } else {
      put(block_site(b, "W_q"), Matrix::zeros(d, d), true);
      put(block_site(b, "W_k"), Matrix::zeros(d, d), true);
      put(block_site(b, "W_v"), Matrix::zeros(d, d), true);
    }
    put(block_site(b, "W_o"), Matrix::zeros(d, d), true);
    put(block_site(b, "W_m"), Matrix::zeros(spec.d_ff, d), true);
    put(block_site(b, "W_f"), Matrix::zeros(d, spec.d_ff), true);
    put(block_site(b, "ln1.g"), Matrix::zeros(d, 1), false);
    put(block_site(b, "ln1.b"), Matrix::zeros(d, 1), false);
    put(block_site(b, "ln2.g"), Matrix::zeros(d, 1), false);
    put(block_site(b, "ln2.b"), Matrix::zeros(d, 1), false);
  }
  put("ln_f.g", Matrix::zeros(d, 1), false);
  put("ln_f.b", Matrix::zeros(d, 1), false);
  const std::size_t head_rows = spec.head_kind == HeadKind::kClassifier ? spec.n_classes
                                                                        : spec.vocab_size;
  put("head.W", Matrix::zeros(head_rows, d), true);
  put("head.b", Matrix::zeros(head_rows, 1), false);
  return m;
}

Model build_model(const ModelSpec& spec, Rng& rng) {
  Model m = build_model_uninitialized(spec);
  constexpr double kInitStd = 0.02;
  // Fixed initialization order so a seed pins every tensor.
  std::vector<std::string> weight_order = {"embed.tok", "embed.pos"};
  for (std::size_t b = 0; b < spec.n_blocks; ++b) {
    if (spec.fused_qkv) {
      weight_order.push_back(block_site(b, "W_qkv"));
    } else {
      weight_order.push_back(block_site(b, "W_q"));
      weight_order.push_back(block_site(b, "W_k"));
      weight_order.push_back(block_site(b, "W_v"));
    }
    weight_order.push_back(block_site(b, "W_o"));
    weight_order.push_back(block_site(b, "W_m"));
    weight_order.push_back(block_site(b, "W_f"));
  }
  weight_order.push_back("head.W");
  for (const auto& name : weight_order) {
    Matrix& w = m.param(name);
    w = gaussian(rng, w.rows(), w.cols(), kInitStd);
  }
  for (std::size_t b = 0; b < spec.n_blocks; ++b) {
    for (const char* ln : {"ln1.g", "ln2.g"}) {
      Matrix& g = m.param(block_site(b, ln));
      for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = 1.0;
    }
  }
  Matrix& gf = m.param("ln_f.g");
  for (std::size_t i = 0; i < gf.size(); ++i) gf.data()[i] = 1.0;
  return m;
}

Matrix softmax_rows(const Matrix& scores, bool causal) {
  Matrix p(scores.rows(), scores.cols());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    const std::size_t jmax = causal ? std::min(i + 1, scores.cols()) : scores.cols();
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < jmax; ++j) row_max = std::max(row_max, scores(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < jmax; ++j) {
      const double e = std::exp(scores(i, j) - row_max);
      p(i, j) = e;
      denom += e;
    }
    for (std::size_t j = 0; j < jmax; ++j) p(i, j) /= denom;
    for (std::size_t j = jmax; j < scores.cols(); ++j) p(i, j) = 0.0;
  }
  return p;
}

ForwardResult forward(const Model& model, const Batch& batch, RunMode mode, Rng* dropout_rng) {
  const ModelSpec& spec = model.spec;
  if (batch.tokens.empty()) throw ConfigError("forward: empty batch");
  const std::size_t bsz = batch.tokens.size();
  const std::size_t len = batch.tokens[0].size();
  if (len == 0 || len > spec.max_seq_len) {
    throw ConfigError("forward: sequence length " + std::to_string(len) +
                      " outside [1, " + std::to_string(spec.max_seq_len) + "]");
  }
  for (const auto& seq : batch.tokens) {
    if (seq.size() != len) throw ConfigError("forward: ragged batch");
    for (int id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= spec.vocab_size) {
        throw ConfigError("forward: token id " + std::to_string(id) +
                          " out of range for vocab " + std::to_string(spec.vocab_size));
      }
    }
  }

  auto cache = std::make_shared<ForwardCache>();
  cache->mode = mode;
  cache->batch_size = bsz;
  cache->seq_len = len;
  cache->tokens = batch.tokens;

  const std::size_t d = spec.d_model;
  const std::size_t t_total = bsz * len;
  const bool causal = spec.head_kind == HeadKind::kLm;

  const Matrix& tok = model.param("embed.tok");
  const Matrix& pos = model.param("embed.pos");
  Matrix x(d, t_total);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t col = b * len + t;
      const std::size_t id = static_cast<std::size_t>(batch.tokens[b][t]);
      for (std::size_t i = 0; i < d; ++i) {
        x(i, col) = tok(i, id) + pos(i, t);
      }
    }
  }
  cache->embedded = x;

  const std::size_t n_heads = spec.n_heads;
  const std::size_t dk = spec.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dk));

  for (std::size_t blk = 0; blk < spec.n_blocks; ++blk) {
    BlockCache bc;
    bc.x_in = x;
    bc.n1 = layernorm_forward(x, model.param(block_site(blk, "ln1.g")),
                              model.param(block_site(blk, "ln1.b")), bc.ln1);
    if (spec.fused_qkv) {
      Matrix qkv = apply_site(model, block_site(blk, "W_qkv"), bc.n1, mode, dropout_rng,
                              cache.get());
      bc.q = slice_block(qkv, 0, d, 0, t_total);
      bc.k = slice_block(qkv, d, 2 * d, 0, t_total);
      bc.v = slice_block(qkv, 2 * d, 3 * d, 0, t_total);
    } else {
      bc.q = apply_site(model, block_site(blk, "W_q"), bc.n1, mode, dropout_rng, cache.get());
      bc.k = apply_site(model, block_site(blk, "W_k"), bc.n1, mode, dropout_rng, cache.get());
      bc.v = apply_site(model, block_site(blk, "W_v"), bc.n1, mode, dropout_rng, cache.get());
    }
    bc.ctx = Matrix::zeros(d, t_total);
    bc.probs.reserve(bsz * n_heads);
    for (std::size_t b = 0; b < bsz; ++b) {
      const std::size_t c0 = b * len;
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t r0 = h * dk;
        const Matrix qh = slice_block(bc.q, r0, r0 + dk, c0, c0 + len);
        const Matrix kh = slice_block(bc.k, r0, r0 + dk, c0, c0 + len);
        const Matrix vh = slice_block(bc.v, r0, r0 + dk, c0, c0 + len);
        const Matrix scores = scale(matmul(transpose(qh), kh), attn_scale);
        Matrix p = softmax_rows(scores, causal);
        add_into_block(bc.ctx, r0, c0, matmul(vh, transpose(p)));
        bc.probs.push_back(std::move(p));
      }
    }
    Matrix attn_out = apply_site(model, block_site(blk, "W_o"), bc.ctx, mode, dropout_rng,
                                 cache.get());
    bc.x2 = add(bc.x_in, attn_out);
    bc.n2 = layernorm_forward(bc.x2, model.param(block_site(blk, "ln2.g")),
                              model.param(block_site(blk, "ln2.b")), bc.ln2);
    bc.ffn_pre = apply_site(model, block_site(blk, "W_m"), bc.n2, mode, dropout_rng,
                            cache.get());
    bc.h = gelu(bc.ffn_pre);
    Matrix f = apply_site(model, block_site(blk, "W_f"), bc.h, mode, dropout_rng, cache.get());
    x = add(bc.x2, f);
    cache->blocks.push_back(std::move(bc));
  }

  cache->n_f = layernorm_forward(x, model.param("ln_f.g"), model.param("ln_f.b"), cache->ln_f);

  const Matrix& head_w = model.param("head.W");
  const Matrix& head_b = model.param("head.b");
  if (spec.head_kind == HeadKind::kClassifier) {
    Matrix cls(d, bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t i = 0; i < d; ++i) cls(i, b) = cache->n_f(i, b * len);
    }
    cache->head_in = std::move(cls);
  } else {
    cache->head_in = cache->n_f;
  }
  Matrix logits = matmul(head_w, cache->head_in);
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    for (std::size_t i = 0; i < logits.rows(); ++i) logits(i, j) += head_b(i, 0);
  }
  check_finite(logits, "forward logits");

  ForwardResult result;
  result.logits = std::move(logits);
  result.cache = std::move(cache);
  return result;
}

std::map<std::string, Matrix> backward(const Model& model, const ForwardResult& fwd,
                                       const Matrix& dlogits) {
  if (!fwd.cache) throw ConfigError("backward: forward cache missing");
  const ForwardCache& c = *fwd.cache;
  if (!dlogits.same_shape(fwd.logits)) {
    throw ShapeError("backward: dlogits " + std::to_string(dlogits.rows()) + "x" +
                     std::to_string(dlogits.cols()) + " does not match logits " +
                     std::to_string(fwd.logits.rows()) + "x" +
                     std::to_string(fwd.logits.cols()));
  }
  const ModelSpec& spec = model.spec;
  const std::size_t d = spec.d_model;
  const std::size_t bsz = c.batch_size;
  const std::size_t len = c.seq_len;
  const std::size_t t_total = bsz * len;
  const std::size_t n_heads = spec.n_heads;
  const std::size_t dk = spec.head_dim();
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dk));

  std::map<std::string, Matrix> grads;

  if (model.tensors.at("head.W").trainable) {
    grads_add(grads, "head.W", matmul(dlogits, transpose(c.head_in)));
  }
  if (model.tensors.at("head.b").trainable) {
    grads_add(grads, "head.b", row_sums(dlogits));
  }
  Matrix d_head_in = matmul(transpose(model.param("head.W")), dlogits);

  Matrix d_nf(d, t_total);
  if (spec.head_kind == HeadKind::kClassifier) {
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t i = 0; i < d; ++i) d_nf(i, b * len) = d_head_in(i, b);
    }
  } else {
    d_nf = d_head_in;
  }

  Matrix dg, db;
  Matrix dx = layernorm_backward(d_nf, c.ln_f, model.param("ln_f.g"), dg, db);
  if (model.tensors.at("ln_f.g").trainable) grads_add(grads, "ln_f.g", std::move(dg));
  if (model.tensors.at("ln_f.b").trainable) grads_add(grads, "ln_f.b", std::move(db));

  for (std::size_t blk = spec.n_blocks; blk-- > 0;) {
    const BlockCache& bc = c.blocks[blk];
    // x3 = x2 + W_f(gelu(W_m(ln2(x2))))
    Matrix dh = site_backward(model, block_site(blk, "W_f"), bc.h, dx, c, grads);
    Matrix dpre = hadamard(dh, gelu_grad(bc.ffn_pre));
    Matrix dn2 = site_backward(model, block_site(blk, "W_m"), bc.n2, dpre, c, grads);
    Matrix dx2 = layernorm_backward(dn2, bc.ln2, model.param(block_site(blk, "ln2.g")), dg, db);
    if (model.tensors.at(block_site(blk, "ln2.g")).trainable) {
      grads_add(grads, block_site(blk, "ln2.g"), std::move(dg));
    }
    if (model.tensors.at(block_site(blk, "ln2.b")).trainable) {
      grads_add(grads, block_site(blk, "ln2.b"), std::move(db));
    }
    dx2 = add(dx2, dx);  // residual

    // x2 = x_in + W_o(attention(ln1(x_in)))
    Matrix dctx = site_backward(model, block_site(blk, "W_o"), bc.ctx, dx2, c, grads);
    Matrix dq(d, t_total), dkm(d, t_total), dv(d, t_total);
    for (std::size_t b = 0; b < bsz; ++b) {
      const std::size_t c0 = b * len;
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t r0 = h * dk;
        const Matrix& p = bc.probs[b * n_heads + h];
        const Matrix dctx_h = slice_block(dctx, r0, r0 + dk, c0, c0 + len);
        const Matrix qh = slice_block(bc.q, r0, r0 + dk, c0, c0 + len);
        const Matrix kh = slice_block(bc.k, r0, r0 + dk, c0, c0 + len);
        const Matrix vh = slice_block(bc.v, r0, r0 + dk, c0, c0 + len);
        add_into_block(dv, r0, c0, matmul(dctx_h, p));
        const Matrix dp = matmul(transpose(dctx_h), vh);
        Matrix ds(len, len);
        for (std::size_t i = 0; i < len; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < len; ++j) dot += dp(i, j) * p(i, j);
          for (std::size_t j = 0; j < len; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
        }
        add_into_block(dq, r0, c0, scale(matmul(kh, transpose(ds)), attn_scale));
        add_into_block(dkm, r0, c0, scale(matmul(qh, ds), attn_scale));
      }
    }
    Matrix dn1;
    if (spec.fused_qkv) {
      const Matrix dqkv = vstack3(dq, dkm, dv);
      dn1 = site_backward(model, block_site(blk, "W_qkv"), bc.n1, dqkv, c, grads);
    } else {
      dn1 = site_backward(model, block_site(blk, "W_q"), bc.n1, dq, c, grads);
      dn1 = add(dn1, site_backward(model, block_site(blk, "W_k"), bc.n1, dkm, c, grads));
      dn1 = add(dn1, site_backward(model, block_site(blk, "W_v"), bc.n1, dv, c, grads));
    }
    Matrix dx_in = layernorm_backward(dn1, bc.ln1, model.param(block_site(blk, "ln1.g")), dg, db);
    if (model.tensors.at(block_site(blk, "ln1.g")).trainable) {
      grads_add(grads, block_site(blk, "ln1.g"), std::move(dg));
    }
    if (model.tensors.at(block_site(blk, "ln1.b")).trainable) {
      grads_add(grads, block_site(blk, "ln1.b"), std::move(db));
    }
    dx = add(dx_in, dx2);  // residual
  }

  if (model.tensors.at("embed.tok").trainable || model.tensors.at("embed.pos").trainable) {
    Matrix dtok = Matrix::zeros(d, spec.vocab_size);
    Matrix dpos = Matrix::zeros(d, spec.max_seq_len);
    for (std::size_t b = 0; b < bsz; ++b) {
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t col = b * len + t;
        const std::size_t id = static_cast<std::size_t>(c.tokens[b][t]);
        for (std::size_t i = 0; i < d; ++i) {
          dtok(i, id) += dx(i, col);
          dpos(i, t) += dx(i, col);
        }
      }
    }
    if (model.tensors.at("embed.tok").trainable) grads_add(grads, "embed.tok", std::move(dtok));
    if (model.tensors.at("embed.pos").trainable) grads_add(grads, "embed.pos", std::move(dpos));
  }

  return grads;
}

PlacementProfile parse_profile(const std::string& name) {
  if (name == "nlu") return PlacementProfile::kNlu;
  if (name == "nlg") return PlacementProfile::kNlg;
  if (name == "none") return PlacementProfile::kNone;
  throw ConfigError("unknown placement profile '" + name + "' (expected nlu|nlg|none)");
}

const char* profile_name(PlacementProfile p) {
  switch (p) {
    case PlacementProfile::kNlu: return "nlu";
    case PlacementProfile::kNlg: return "nlg";
    case PlacementProfile::kNone: return "none";
  }
  return "?";
}

namespace {

void freeze_base(Model& model) {
  for (auto& [name, entry] : model.tensors) {
    if (name.rfind("head.", 0) == 0) {
      entry.trainable = model.train_head;
    } else if (name.find(".ln") != std::string::npos || name.rfind("ln_f", 0) == 0) {
      entry.trainable = model.train_layer_norm;
    } else {
      entry.trainable = false;
    }
  }
}

bool plain_adapter_site(const std::string& site) {
  const auto dot = site.find('.');
  if (dot == std::string::npos || site.rfind("block", 0) != 0) return false;
  const std::string body = site.substr(dot + 1);
  return body == "W_q" || body == "W_k" || body == "W_v" || body == "W_o" ||
         body == "W_m" || body == "W_f";
}

}  // namespace

void attach_adapter(Model& model, const std::string& site, const AdapterConfig& config,
                    Rng& rng) {
  if (model.merged) throw ConfigError("attach_adapter: model already merged");
  if (!plain_adapter_site(site)) {
    throw ConfigError("attach_adapter: '" + site + "' is not an adapter site");
  }
  auto it = model.tensors.find(site);
  if (it == model.tensors.end()) {
    throw ConfigError("attach_adapter: unknown site '" + site + "'");
  }
  if (model.adapters.count(site) != 0) {
    throw ConfigError("attach_adapter: adapter already attached at '" + site + "'");
  }
  const Matrix& w = it->second.value;
  model.adapters.emplace(site, init_adapter(config, w.rows(), w.cols(), rng));
  freeze_base(model);
}

void attach_merged_adapter(Model& model, std::size_t block, const AdapterConfig& config,
                           std::vector<QkvChannel> enabled, Rng& rng) {
  if (model.merged) throw ConfigError("attach_merged_adapter: model already merged");
  if (!model.spec.fused_qkv) {
    throw ConfigError("attach_merged_adapter: model does not use fused QKV");
  }
  const std::string site = block_site(block, "W_qkv");
  if (model.tensors.find(site) == model.tensors.end()) {
    throw ConfigError("attach_merged_adapter: unknown site '" + site + "'");
  }
  if (model.merged_adapters.count(site) != 0) {
    throw ConfigError("attach_merged_adapter: adapter already attached at '" + site + "'");
  }
  model.merged_adapters.emplace(
      site, init_merged(config, model.spec.d_model, model.spec.d_model, std::move(enabled), rng));
  freeze_base(model);
}

void attach_adapters(Model& model, PlacementProfile profile, const AdapterConfig& config,
                     Rng& rng) {
  switch (profile) {
    case PlacementProfile::kNone:
      return;
    case PlacementProfile::kNlu: {
      if (model.spec.fused_qkv) {
        throw ConfigError("NLU placement requires separate (non-fused) QKV weights");
      }
      for (std::size_t b = 0; b < model.spec.n_blocks; ++b) {
        for (const char* body : {"W_q", "W_v", "W_m", "W_o"}) {
          attach_adapter(model, block_site(b, body), config, rng);
        }
      }
      return;
    }
    case PlacementProfile::kNlg: {
      if (!model.spec.fused_qkv) {
        throw ConfigError("NLG placement requires fused QKV weights");
      }
      for (std::size_t b = 0; b < model.spec.n_blocks; ++b) {
        attach_merged_adapter(model, b, config,
                              {QkvChannel::kQ, QkvChannel::kK, QkvChannel::kV}, rng);
        attach_adapter(model, block_site(b, "W_f"), config, rng);
      }
      return;
    }
  }
}

void merge_all(Model& model) {
  if (!model.has_adapters()) throw ConfigError("merge_all: no adapters attached");
  if (model.merged) throw ConfigError("merge_all: already merged");
  for (const auto& [site, p] : model.adapters) {
    Matrix& w = model.param(site);
    w = add(w, delta_weight(p));
  }
  for (const auto& [site, p] : model.merged_adapters) {
    Matrix& w = model.param(site);
    w = add(w, delta_weight_merged(p));
  }
  model.merged = true;
}

void unmerge_all(Model& model) {
  if (!model.merged) throw ConfigError("unmerge_all: model is not merged");
  for (const auto& [site, p] : model.adapters) {
    Matrix& w = model.param(site);
    w = sub(w, delta_weight(p));
  }
  for (const auto& [site, p] : model.merged_adapters) {
    Matrix& w = model.param(site);
    w = sub(w, delta_weight_merged(p));
  }
  model.merged = false;
}

}  // namespace mtadapt
