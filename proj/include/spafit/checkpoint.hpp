// SPDX-License-Identifier: Apache-2.0
//
// Binary container for named tensors.
//
// Layout (all integers little-endian):
//   magic      8 bytes  "SPAFITCK"
//   version    u8       kContainerVersion
//   header     u32 length + UTF-8 text, one "key=value" per line
//   count      u32 number of tensors
//   tensor*    u32 name length, name bytes,
//              u8 dtype (0 = float64), u8 status, u8 rank,
//              u64 dims[rank], float64 payload[prod(dims)]
// Nothing may follow the last tensor.
//
// Checkpoints carry the model config in the header; adapter files use the
// same container with `kind=adapter` and a `plan=` line.

#pragma once

#include <spafit/params.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace spafit {

inline constexpr std::uint8_t kContainerVersion = 1;

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
/// Bad magic, bad dtype, malformed header or trailing bytes.
class FormatError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};
class VersionError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};
class TruncatedError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};
class UnknownTensorError : public CheckpointError {
public:
  UnknownTensorError(const std::string &name)
      : CheckpointError("unknown tensor '" + name + "'"), name_(name) {}
  const std::string &name() const { return name_; }

private:
  std::string name_;
};
class MissingTensorError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};
/// File could not be opened, read or written.
class IoError : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};

struct NamedTensor {
  std::string name;
  ParamStatus status = ParamStatus::Frozen;
  Tensor tensor;
};

struct Container {
  std::map<std::string, std::string> header;
  std::vector<NamedTensor> tensors;
};

std::vector<std::uint8_t> encode_container(const Container &c);
Container decode_container(const std::vector<std::uint8_t> &bytes);
void write_container(const Container &c, const std::filesystem::path &path);
Container read_container(const std::filesystem::path &path);

/// Config <-> header entries; doubles use shortest round-trip text.
void put_config(std::map<std::string, std::string> &header,
                const ModelConfig &config);
ModelConfig get_config(const std::map<std::string, std::string> &header);

/// Writes config, every base tensor with its status, and LoRA factors as
/// `<target>.lora_A` / `<target>.lora_B`.
void save_checkpoint(const ParamStore &store, const std::filesystem::path &path);
/// Strict inverse of save_checkpoint: every layout tensor must be present
/// with its canonical shape and nothing else may appear.
ParamStore load_checkpoint(const std::filesystem::path &path);

/// In-memory forms of the two calls above.
Container checkpoint_container(const ParamStore &store);
ParamStore store_from_container(const Container &c);

} // namespace spafit
