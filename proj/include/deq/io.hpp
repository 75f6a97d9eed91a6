#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>

// Little-endian byte helpers shared by the binary file formats.
namespace deq::io {

void put_u32(std::string& out, std::uint32_t v);
void put_u8(std::string& out, std::uint8_t v);

/// Sequential reader over a byte buffer; every getter returns false instead
/// of reading past the end.
class Reader {
 public:
  explicit Reader(const std::string& bytes) : data_(bytes) {}

  bool u32(std::uint32_t& v);
  bool u8(std::uint8_t& v);
  bool bytes(void* dst, std::size_t n);
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const std::string& data_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace deq::io
