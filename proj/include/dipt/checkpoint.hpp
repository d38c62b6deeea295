#pragma once

// Single-file parameter container shared by teacher, prompt-token and
// student checkpoints:
//
//   "DIPTCKPT"                  8-byte magic
//   u64 little-endian           header length in bytes
//   JSON header                 caller metadata + format_version +
//                               tensor table {name, rows, cols, offset} +
//                               blob_sha256
//   float32 little-endian blob  tensors back to back, offsets in bytes
//
// Values are written as float32; callers keep their parameters
// float32-representable so a save/load round-trip is bit-exact.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dipt/autograd.hpp"
#include "dipt/layers.hpp"

namespace dipt {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  nlohmann::json header;
  std::vector<std::pair<std::string, nn::Tensor>> tensors;

  const nn::Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

// `meta` must be a JSON object; reserved keys are overwritten.
void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                      const std::vector<std::pair<std::string, const nn::Tensor*>>& tensors);
void write_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta, const nn::ParamSet& params);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Copies every tensor of `ckpt` into the same-named parameter; shapes must
// match and every parameter must be present.
void load_params(const Checkpoint& ckpt, nn::ParamSet& params);

// SHA-256 over parameter names, shapes and float32 values, in order.
std::string params_hash(const nn::ParamSet& params);

}  // namespace dipt
