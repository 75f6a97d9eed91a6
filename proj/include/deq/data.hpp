#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "deq/tensor.hpp"

namespace deq {

inline constexpr std::size_t kCopySymbols = 10;
inline constexpr std::size_t kCopyPrefix = 10;

/// Copy-memory instances of total length T + 20, stored row by row.
///
/// Positions (0-based): x[0..9] ∈ {1..8}, x[10..T+8] = 0, x[T+9] = 9 (the
/// delimiter), x[T+10..T+19] = 0; y is 0 except y[T+10..T+19] = x[0..9].
struct CopyMemoryData {
  std::size_t length = 0;
  std::vector<std::uint8_t> x, y;

  std::size_t count() const { return length ? x.size() / length : 0; }
  std::span<const std::uint8_t> input(std::size_t i) const { return {x.data() + i * length, length}; }
  std::span<const std::uint8_t> target(std::size_t i) const { return {y.data() + i * length, length}; }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

CopyMemoryData generate_copy_memory(std::size_t count, std::size_t delay, std::mt19937_64& rng);

/// Writes train.bin and test.bin into `dir`. Both splits come from one RNG
/// stream seeded with `seed`, training set first.
void gen_copy_memory(std::size_t n_train, std::size_t n_test, std::size_t delay, std::uint64_t seed,
                     const std::filesystem::path& dir);

/// Returns an empty string when every instance satisfies the layout, else a
/// description of the first violation.
std::string check_copy_memory(const CopyMemoryData& data);

void write_dataset(const CopyMemoryData& data, const std::filesystem::path& path);
CopyMemoryData read_dataset(const std::filesystem::path& path);

struct Batch {
  Tensor x;        // (N, L, 10) one-hot
  Tensor targets;  // (N, L) class indices
};

Batch make_batch(const CopyMemoryData& data, std::span<const std::size_t> indices);
/// Instances [begin, min(end, count)).
Batch make_batch(const CopyMemoryData& data, std::size_t begin, std::size_t end);

}  // namespace deq
