// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a text header (format version, provenance, model
// config, tensor directory) followed by raw little-endian float64 payloads.
// Masks, when present, are stored as a second payload block per tensor.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "blu/denoiser.hpp"
#include "blu/param_store.hpp"

namespace blu {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  DenoiserConfig model;
  ParamStore params;
  std::string config_digest;
  std::int64_t step = 0;
  std::string content_hash;  ///< git blob id of the payload; filled by save/load
};

std::string serialize_checkpoint(Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace blu
