#pragma once

#include <cstdint>
#include <string>

#include "mtadapt/model.hpp"

namespace mtadapt {

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'A', 'D'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

// Container layout, little-endian:
//   magic "MTAD", version u16,
//   config blob: u32 length + canonical JSON text
//     (model spec, adapter attachments, merged flag, embedded experiment),
//   tensor count u32,
//   repeated: name length u16, name bytes, tensor record (see tensor_io).
// Tensors are written in the deterministic named_tensors() order, so
// save -> load -> save reproduces the file byte for byte.

/// `experiment_json` is embedded verbatim in the blob (may be empty). With
/// include_adapters=false only base tensors are written and the attachment
/// list is dropped - used for merged inference checkpoints.
void save_checkpoint(const std::string& path, const Model& model,
                     const std::string& experiment_json, bool include_adapters = true);

struct LoadedCheckpoint {
  Model model;
  std::string experiment_json;  // as embedded at save time
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace mtadapt
