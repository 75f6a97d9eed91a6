#include "deq/data.hpp"

#include <fstream>
#include <numeric>

#include "deq/io.hpp"

namespace deq {

CopyMemoryData generate_copy_memory(std::size_t count, std::size_t delay, std::mt19937_64& rng) {
  if (delay < 1) throw std::invalid_argument("copy memory: T must be >= 1");
  CopyMemoryData d;
  d.length = delay + 2 * kCopyPrefix;
  d.x.assign(count * d.length, 0);
  d.y.assign(count * d.length, 0);
  std::uniform_int_distribution<int> symbol(1, 8);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint8_t* x = d.x.data() + i * d.length;
    std::uint8_t* y = d.y.data() + i * d.length;
    for (std::size_t j = 0; j < kCopyPrefix; ++j) {
      x[j] = static_cast<std::uint8_t>(symbol(rng));
      y[delay + kCopyPrefix + j] = x[j];
    }
    x[delay + kCopyPrefix - 1] = 9;
  }
  return d;
}

std::string check_copy_memory(const CopyMemoryData& d) {
  if (d.length <= 2 * kCopyPrefix) return "length " + std::to_string(d.length) + " leaves T < 1";
  const std::size_t delay = d.length - 2 * kCopyPrefix;
  for (std::size_t i = 0; i < d.count(); ++i) {
    const auto x = d.input(i), y = d.target(i);
    auto fail = [&](const std::string& what, std::size_t pos) {
      return "instance " + std::to_string(i) + ": " + what + " at position " + std::to_string(pos);
    };
    for (std::size_t j = 0; j < d.length; ++j) {
      const bool prefix = j < kCopyPrefix;
      const bool delimiter = j == delay + kCopyPrefix - 1;
      if (prefix && (x[j] < 1 || x[j] > 8)) return fail("prefix symbol outside 1..8", j);
      if (delimiter && x[j] != 9) return fail("missing delimiter", j);
      if (!prefix && !delimiter && x[j] != 0) return fail("nonzero filler", j);
      const bool recall = j >= delay + kCopyPrefix;
      const std::uint8_t expect = recall ? x[j - delay - kCopyPrefix] : 0;
      if (y[j] != expect) return fail("wrong target", j);
    }
  }
  return {};
}

void write_dataset(const CopyMemoryData& data, const std::filesystem::path& path) {
  std::string bytes;
  io::put_u32(bytes, static_cast<std::uint32_t>(data.count()));
  io::put_u32(bytes, static_cast<std::uint32_t>(data.length));
  for (std::size_t i = 0; i < data.count(); ++i) {
    bytes.append(reinterpret_cast<const char*>(data.input(i).data()), data.length);
    bytes.append(reinterpret_cast<const char*>(data.target(i).data()), data.length);
  }
  io::write_file_atomic(path, bytes);
}

CopyMemoryData read_dataset(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  io::Reader in(bytes);
  CopyMemoryData d;
  std::uint32_t count = 0, length = 0;
  if (!in.u32(count) || !in.u32(length)) throw DatasetError(path.string() + ": truncated header");
  d.length = length;
  if (in.remaining() != 2ull * count * length) {
    throw DatasetError(path.string() + ": expected " + std::to_string(2ull * count * length) +
                       " payload bytes for " + std::to_string(count) + " instances of length " +
                       std::to_string(length) + ", found " + std::to_string(in.remaining()));
  }
  d.x.resize(std::size_t{count} * length);
  d.y.resize(std::size_t{count} * length);
  for (std::size_t i = 0; i < count; ++i) {
    in.bytes(d.x.data() + i * length, length);
    in.bytes(d.y.data() + i * length, length);
  }
  return d;
}

void gen_copy_memory(std::size_t n_train, std::size_t n_test, std::size_t delay, std::uint64_t seed,
                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  const CopyMemoryData train = generate_copy_memory(n_train, delay, rng);
  const CopyMemoryData test = generate_copy_memory(n_test, delay, rng);
  write_dataset(train, dir / "train.bin");
  write_dataset(test, dir / "test.bin");
}

Batch make_batch(const CopyMemoryData& data, std::span<const std::size_t> indices) {
  const std::size_t n = indices.size(), len = data.length;
  Batch b{Tensor({n, len, kCopySymbols}), Tensor({n, len})};
  for (std::size_t r = 0; r < n; ++r) {
    if (indices[r] >= data.count()) throw std::out_of_range("make_batch: index " + std::to_string(indices[r]));
    const auto x = data.input(indices[r]), y = data.target(indices[r]);
    for (std::size_t t = 0; t < len; ++t) {
      b.x.at(r, t, x[t]) = 1.0;
      b.targets.at(r, t) = y[t];
    }
  }
  return b;
}

Batch make_batch(const CopyMemoryData& data, std::size_t begin, std::size_t end) {
  end = std::min(end, data.count());
  std::vector<std::size_t> idx(end > begin ? end - begin : 0);
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch(data, idx);
}

}  // namespace deq
