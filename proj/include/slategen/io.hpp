// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "slategen/nn.hpp"

namespace slategen {

/// Missing, malformed or mismatched input artifact.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::string& path);
/// Writes through a temporary sibling and renames, so readers never observe a
/// partial file.
void write_file_atomic(const std::string& path, const std::string& contents);
bool file_exists(const std::string& path);

/// Non-empty lines of a line-delimited file.
std::vector<std::string> read_lines(const std::string& path);

// Binary checkpoint:
//   magic "SLGCKPT1" | u32 version | str kind | str config | u32 count |
//   count × (str name | u32 ndim | ndim × u64 dim | float32 data)
// with str = u32 length + bytes, all little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string kind;
  std::string config;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
};

Checkpoint make_checkpoint(std::string kind, std::string config, const nn::ParamList& params);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);
/// Copies stored values into the parameters; every parameter must be present
/// with an identical shape.
void restore_params(const Checkpoint& ckpt, const nn::ParamList& params);

}  // namespace slategen
