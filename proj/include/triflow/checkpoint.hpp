#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "triflow/config.hpp"
#include "triflow/nn.hpp"

namespace triflow {

// Self-describing parameter container: a text header (version, step, RNG
// state, flat config, tensor directory with name/shape/offset) followed by
// the raw little-endian float32 payloads in directory order. Round trips are
// bit-exact, so a reloaded model reproduces forward passes bit for bit.
struct CheckpointMeta {
  std::int64_t step = 0;
  std::string rng_state;  // opaque; empty when not tracked
  KeyValueConfig config;
};

void save_checkpoint(const std::string& path, const std::vector<NamedParam<float>>& params,
                     const CheckpointMeta& meta);

// Header only: enough to rebuild the model before loading the tensors.
CheckpointMeta read_checkpoint_meta(const std::string& path);

// Fills `params` (matched by name; shapes must agree) from the file. Every
// file tensor must land somewhere and every param must be filled.
CheckpointMeta load_checkpoint(const std::string& path, std::vector<NamedParam<float>>& params);

}  // namespace triflow
