#include "mtadapt/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "mtadapt/tensor_io.hpp"

namespace mtadapt {

namespace {

using nlohmann::json;

json spec_to_json(const ModelSpec& s) {
  json j;
  j["vocab_size"] = s.vocab_size;
  j["d_model"] = s.d_model;
  j["n_heads"] = s.n_heads;
  j["n_blocks"] = s.n_blocks;
  j["d_ff"] = s.d_ff;
  j["max_seq_len"] = s.max_seq_len;
  j["fused_qkv"] = s.fused_qkv;
  j["head_kind"] = s.head_kind == HeadKind::kClassifier ? "classifier" : "lm";
  j["n_classes"] = s.n_classes;
  return j;
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.vocab_size = j.at("vocab_size").get<std::size_t>();
  s.d_model = j.at("d_model").get<std::size_t>();
  s.n_heads = j.at("n_heads").get<std::size_t>();
  s.n_blocks = j.at("n_blocks").get<std::size_t>();
  s.d_ff = j.at("d_ff").get<std::size_t>();
  s.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  s.fused_qkv = j.at("fused_qkv").get<bool>();
  const std::string kind = j.at("head_kind").get<std::string>();
  if (kind != "classifier" && kind != "lm") {
    throw IoError("checkpoint: unknown head kind '" + kind + "'");
  }
  s.head_kind = kind == "classifier" ? HeadKind::kClassifier : HeadKind::kLm;
  s.n_classes = j.at("n_classes").get<std::size_t>();
  return s;
}

json adapter_config_to_json(const AdapterConfig& c) {
  json j;
  j["rank"] = c.rank;
  j["alpha"] = c.alpha;
  j["variant"] = variant_name(c.variant);
  j["init_std"] = c.init_std;
  j["dropout_prob"] = c.dropout_prob;
  return j;
}

AdapterConfig adapter_config_from_json(const json& j) {
  AdapterConfig c;
  c.rank = j.at("rank").get<std::size_t>();
  c.alpha = j.at("alpha").get<double>();
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.init_std = j.at("init_std").get<double>();
  c.dropout_prob = j.at("dropout_prob").get<double>();
  return c;
}

json attachments_to_json(const Model& model) {
  json arr = json::array();
  for (const auto& [site, p] : model.adapters) {
    json a;
    a["site"] = site;
    a["kind"] = "plain";
    a["config"] = adapter_config_to_json(p.config);
    arr.push_back(a);
  }
  for (const auto& [site, p] : model.merged_adapters) {
    json a;
    a["site"] = site;
    a["kind"] = "merged";
    a["config"] = adapter_config_to_json(p.config);
    std::string channels;
    for (QkvChannel c : p.enabled) channels += channel_name(c);
    a["enabled"] = channels;
    arr.push_back(a);
  }
  return arr;
}

void attach_from_json(Model& model, const json& arr) {
  Rng scratch(0);  // placeholder values, every tensor is overwritten below
  for (const auto& a : arr) {
    const std::string site = a.at("site").get<std::string>();
    const AdapterConfig config = adapter_config_from_json(a.at("config"));
    const std::string kind = a.at("kind").get<std::string>();
    if (kind == "plain") {
      attach_adapter(model, site, config, scratch);
    } else if (kind == "merged") {
      const std::string prefix = "block";
      if (site.rfind(prefix, 0) != 0) throw IoError("checkpoint: bad merged site " + site);
      const std::size_t block = std::stoul(site.substr(prefix.size()));
      attach_merged_adapter(model, block, config,
                            parse_channels(a.at("enabled").get<std::string>()), scratch);
    } else {
      throw IoError("checkpoint: unknown attachment kind '" + kind + "'");
    }
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& experiment_json, bool include_adapters) {
  json blob;
  blob["model"] = spec_to_json(model.spec);
  blob["attachments"] = include_adapters ? attachments_to_json(model) : json::array();
  blob["merged"] = model.merged;
  blob["train_head"] = model.train_head;
  blob["train_layer_norm"] = model.train_layer_norm;
  if (experiment_json.empty()) {
    blob["experiment"] = nullptr;
  } else {
    blob["experiment"] = json::parse(experiment_json);
  }
  const std::string blob_text = blob.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, 4);
  write_u16(os, kCheckpointVersion);
  write_u32(os, static_cast<std::uint32_t>(blob_text.size()));
  os.write(blob_text.data(), static_cast<std::streamsize>(blob_text.size()));

  const auto tensors = model.named_tensors(include_adapters);
  write_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    write_u16(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, *m, DType::kF64);
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() != 4 || std::string(magic, 4) != std::string(kCheckpointMagic, 4)) {
    throw IoError("'" + path + "' is not a checkpoint (bad magic)");
  }
  const std::uint16_t version = read_u16(is);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t blob_len = read_u32(is);
  std::string blob_text(blob_len, '\0');
  is.read(blob_text.data(), blob_len);
  if (is.gcount() != static_cast<std::streamsize>(blob_len)) {
    throw IoError("truncated checkpoint config blob");
  }
  json blob;
  try {
    blob = json::parse(blob_text);
  } catch (const json::parse_error& e) {
    throw IoError(std::string("corrupt checkpoint config blob: ") + e.what());
  }

  LoadedCheckpoint out;
  out.model = build_model_uninitialized(spec_from_json(blob.at("model")));
  out.model.train_head = blob.at("train_head").get<bool>();
  out.model.train_layer_norm = blob.at("train_layer_norm").get<bool>();
  attach_from_json(out.model, blob.at("attachments"));
  out.model.merged = blob.at("merged").get<bool>();
  if (!blob.at("experiment").is_null()) {
    out.experiment_json = blob.at("experiment").dump();
  }

  const std::uint32_t count = read_u32(is);
  std::size_t filled = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = read_u16(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (is.gcount() != static_cast<std::streamsize>(name_len)) {
      throw IoError("truncated tensor name");
    }
    Matrix value = read_tensor(is);
    Matrix* dst = out.model.tensor_ptr(name);
    if (dst == nullptr) throw IoError("checkpoint names unknown tensor '" + name + "'");
    if (!dst->same_shape(value)) {
      throw IoError("checkpoint tensor '" + name + "' has unexpected shape");
    }
    *dst = std::move(value);
    ++filled;
  }
  const std::size_t expected = out.model.named_tensors(true).size();
  if (filled != expected) {
    throw IoError("checkpoint holds " + std::to_string(filled) + " tensors, model needs " +
                  std::to_string(expected));
  }
  return out;
}

}  // namespace mtadapt
