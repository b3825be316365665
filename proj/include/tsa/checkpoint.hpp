// Checkpoint container: "TSAM1" magic, a canonical key=value config block,
// then named tensor blobs as little-endian 32-bit floats. All persistent
// training state is kept float32-representable so a save/load round trip is
// value-exact.

#pragma once

#include <map>
#include <string>

#include "tsa/config.hpp"
#include "tsa/tensor.hpp"

namespace tsa {

struct Checkpoint {
  KvConfig config;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// Rounds every value to the nearest float32 (the storage precision).
void snap_to_f32(Tensor& t);

}  // namespace tsa
