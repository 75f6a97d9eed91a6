#pragma once

#include <filesystem>
#include <stdexcept>

#include "deq/tensor.hpp"

namespace deq {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadMagicError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class TruncatedCheckpointError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// "DEQC", u32 version, u32 count, then per entry: u32 name length, name,
/// u8 dtype (0 = f64, 1 = f32), u32 rank, u32 dims[rank], little-endian data.
std::string encode_checkpoint(const ParamSet& params);
ParamSet decode_checkpoint(const std::string& bytes);

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path);
ParamSet load_checkpoint(const std::filesystem::path& path);

}  // namespace deq
