#include "mtadapt/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

namespace mtadapt {

namespace {

using nlohmann::json;

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (allowed.count(key) == 0) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void parse_model(const json& j, ModelSpec& s) {
  reject_unknown_keys(j, {"vocab_size", "d_model", "n_heads", "n_blocks", "d_ff",
                          "max_seq_len", "fused_qkv", "head_kind", "n_classes"},
                      "model");
  read_field(j, "vocab_size", s.vocab_size);
  read_field(j, "d_model", s.d_model);
  read_field(j, "n_heads", s.n_heads);
  read_field(j, "n_blocks", s.n_blocks);
  read_field(j, "d_ff", s.d_ff);
  read_field(j, "max_seq_len", s.max_seq_len);
  read_field(j, "fused_qkv", s.fused_qkv);
  if (auto it = j.find("head_kind"); it != j.end()) {
    const std::string kind = it->get<std::string>();
    if (kind == "classifier") {
      s.head_kind = HeadKind::kClassifier;
    } else if (kind == "lm") {
      s.head_kind = HeadKind::kLm;
    } else {
      throw ConfigError("config: head_kind must be classifier|lm, got '" + kind + "'");
    }
  }
  read_field(j, "n_classes", s.n_classes);
}

void parse_adapter(const json& j, ExperimentConfig& c) {
  reject_unknown_keys(j, {"rank", "alpha", "variant", "init_std", "dropout_prob", "profile",
                          "merged_channels", "train_head", "train_layer_norm", "freeze_all"},
                      "adapter");
  read_field(j, "rank", c.adapter.rank);
  read_field(j, "alpha", c.adapter.alpha);
  if (auto it = j.find("variant"); it != j.end()) {
    c.adapter.variant = parse_variant(it->get<std::string>());
  }
  read_field(j, "init_std", c.adapter.init_std);
  read_field(j, "dropout_prob", c.adapter.dropout_prob);
  if (auto it = j.find("profile"); it != j.end()) {
    c.profile = parse_profile(it->get<std::string>());
  }
  read_field(j, "merged_channels", c.merged_channels);
  read_field(j, "train_head", c.train_head);
  read_field(j, "train_layer_norm", c.train_layer_norm);
  read_field(j, "freeze_all", c.freeze_all);
}

void parse_train(const json& j, TrainConfig& t) {
  reject_unknown_keys(j, {"learning_rate", "batch_size", "epochs", "warmup_ratio",
                          "warmup_steps", "weight_decay", "label_smoothing", "seed", "beta1",
                          "beta2", "eps", "max_grad_norm"},
                      "train");
  read_field(j, "learning_rate", t.learning_rate);
  read_field(j, "batch_size", t.batch_size);
  read_field(j, "epochs", t.epochs);
  if (auto it = j.find("warmup_ratio"); it != j.end()) {
    t.warmup_ratio = it->get<double>();
    t.warmup_steps.reset();
  }
  if (auto it = j.find("warmup_steps"); it != j.end()) {
    if (j.contains("warmup_ratio")) {
      throw ConfigError("config: set exactly one of warmup_ratio/warmup_steps");
    }
    t.warmup_steps = it->get<std::size_t>();
    t.warmup_ratio.reset();
  }
  read_field(j, "weight_decay", t.weight_decay);
  read_field(j, "label_smoothing", t.label_smoothing);
  read_field(j, "seed", t.seed);
  read_field(j, "beta1", t.beta1);
  read_field(j, "beta2", t.beta2);
  read_field(j, "eps", t.eps);
  read_field(j, "max_grad_norm", t.max_grad_norm);
}

void parse_task(const json& j, TaskConfig& t) {
  reject_unknown_keys(j, {"kind", "n_train", "n_val", "n_test", "seq_len", "imbalance"},
                      "task");
  read_field(j, "kind", t.kind);
  read_field(j, "n_train", t.n_train);
  read_field(j, "n_val", t.n_val);
  read_field(j, "n_test", t.n_test);
  read_field(j, "seq_len", t.seq_len);
  read_field(j, "imbalance", t.imbalance);
}

}  // namespace

void TaskConfig::validate() const {
  if (kind != "bracket" && kind != "pair") {
    throw ConfigError("config: task kind must be bracket|pair, got '" + kind + "'");
  }
  if (n_train == 0) throw ConfigError("config: task n_train must be positive");
  if (seq_len == 0) throw ConfigError("config: task seq_len must be positive");
}

void ExperimentConfig::validate() const {
  model.validate();
  adapter.validate();
  train.validate();
  task.validate();
  if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
  if (report != "median" && report != "mean") {
    throw ConfigError("config: report must be median|mean, got '" + report + "'");
  }
  if (freeze_all && profile != PlacementProfile::kNone) {
    throw ConfigError("config: freeze_all requires profile none");
  }
  if (profile == PlacementProfile::kNlu && model.fused_qkv) {
    throw ConfigError("config: NLU profile requires fused_qkv=false");
  }
  if (profile == PlacementProfile::kNlg && !model.fused_qkv) {
    throw ConfigError("config: NLG profile requires fused_qkv=true");
  }
  if (profile == PlacementProfile::kNlg && parse_channels(merged_channels).empty()) {
    throw ConfigError("config: merged_channels must name at least one of q, k, v");
  }
  if (task.seq_len > model.max_seq_len) {
    throw ConfigError("config: task seq_len exceeds model max_seq_len");
  }
}

ExperimentConfig parse_experiment_config(const json& j) {
  reject_unknown_keys(j, {"model", "adapter", "train", "task", "seeds", "report"}, "config");
  ExperimentConfig c;
  if (auto it = j.find("model"); it != j.end()) parse_model(*it, c.model);
  if (auto it = j.find("adapter"); it != j.end()) parse_adapter(*it, c);
  if (auto it = j.find("train"); it != j.end()) parse_train(*it, c.train);
  if (auto it = j.find("task"); it != j.end()) parse_task(*it, c.task);
  if (auto it = j.find("seeds"); it != j.end()) {
    c.seeds = it->get<std::vector<std::uint64_t>>();
  }
  if (auto it = j.find("report"); it != j.end()) c.report = it->get<std::string>();
  c.validate();
  return c;
}

json experiment_to_json(const ExperimentConfig& c) {
  json j;
  j["model"]["vocab_size"] = c.model.vocab_size;
  j["model"]["d_model"] = c.model.d_model;
  j["model"]["n_heads"] = c.model.n_heads;
  j["model"]["n_blocks"] = c.model.n_blocks;
  j["model"]["d_ff"] = c.model.d_ff;
  j["model"]["max_seq_len"] = c.model.max_seq_len;
  j["model"]["fused_qkv"] = c.model.fused_qkv;
  j["model"]["head_kind"] = c.model.head_kind == HeadKind::kClassifier ? "classifier" : "lm";
  j["model"]["n_classes"] = c.model.n_classes;
  j["adapter"]["rank"] = c.adapter.rank;
  j["adapter"]["alpha"] = c.adapter.alpha;
  j["adapter"]["variant"] = variant_name(c.adapter.variant);
  j["adapter"]["init_std"] = c.adapter.init_std;
  j["adapter"]["dropout_prob"] = c.adapter.dropout_prob;
  j["adapter"]["profile"] = profile_name(c.profile);
  j["adapter"]["merged_channels"] = c.merged_channels;
  j["adapter"]["train_head"] = c.train_head;
  j["adapter"]["train_layer_norm"] = c.train_layer_norm;
  j["adapter"]["freeze_all"] = c.freeze_all;
  j["train"]["learning_rate"] = c.train.learning_rate;
  j["train"]["batch_size"] = c.train.batch_size;
  j["train"]["epochs"] = c.train.epochs;
  if (c.train.warmup_ratio) j["train"]["warmup_ratio"] = *c.train.warmup_ratio;
  if (c.train.warmup_steps) j["train"]["warmup_steps"] = *c.train.warmup_steps;
  j["train"]["weight_decay"] = c.train.weight_decay;
  j["train"]["label_smoothing"] = c.train.label_smoothing;
  j["train"]["seed"] = c.train.seed;
  j["train"]["beta1"] = c.train.beta1;
  j["train"]["beta2"] = c.train.beta2;
  j["train"]["eps"] = c.train.eps;
  j["train"]["max_grad_norm"] = c.train.max_grad_norm;
  j["task"]["kind"] = c.task.kind;
  j["task"]["n_train"] = c.task.n_train;
  j["task"]["n_val"] = c.task.n_val;
  j["task"]["n_test"] = c.task.n_test;
  j["task"]["seq_len"] = c.task.seq_len;
  j["task"]["imbalance"] = c.task.imbalance;
  j["seeds"] = c.seeds;
  j["report"] = c.report;
  return j;
}

std::string canonical_config_text(const ExperimentConfig& c) {
  // nlohmann::json keeps object keys sorted, so dump() is canonical.
  return experiment_to_json(c).dump();
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in '" + path + "': " + e.what());
  }
  return parse_experiment_config(j);
}

Model build_experiment_model(const ExperimentConfig& c, std::uint64_t seed) {
  c.validate();
  Rng root(seed);
  Rng init_rng = root.derive(streams::kModelInit);
  Model model = build_model(c.model, init_rng);
  model.train_head = c.train_head;
  model.train_layer_norm = c.train_layer_norm;
  if (c.profile != PlacementProfile::kNone) {
    Rng adapter_rng = root.derive(streams::kAdapterInit);
    if (c.profile == PlacementProfile::kNlg) {
      for (std::size_t b = 0; b < c.model.n_blocks; ++b) {
        attach_merged_adapter(model, b, c.adapter, parse_channels(c.merged_channels),
                              adapter_rng);
        attach_adapter(model, "block" + std::to_string(b) + ".W_f", c.adapter, adapter_rng);
      }
    } else {
      attach_adapters(model, c.profile, c.adapter, adapter_rng);
    }
  }
  if (c.freeze_all) {
    for (auto& [name, entry] : model.tensors) entry.trainable = false;
  }
  return model;
}

Dataset build_experiment_dataset(const ExperimentConfig& c, std::uint64_t seed) {
  c.validate();
  Rng data_rng = Rng(seed).derive(streams::kDataGen);
  if (c.task.kind == "bracket") {
    return gen_bracket_task(c.task.n_train, c.task.n_val, c.task.n_test, c.task.seq_len,
                            c.task.imbalance, data_rng);
  }
  return gen_pair_task(c.task.n_train, c.task.n_val, c.task.n_test, c.task.seq_len,
                       c.model.vocab_size, data_rng);
}

}  // namespace mtadapt
