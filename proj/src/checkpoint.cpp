#include "deq/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "deq/io.hpp"

namespace deq {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string encode_checkpoint(const ParamSet& params) {
  std::string out = "DEQC";
  io::put_u32(out, kCheckpointVersion);
  io::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    io::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    io::put_u8(out, static_cast<std::uint8_t>(t.dtype()));
    io::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) io::put_u32(out, static_cast<std::uint32_t>(d));
    if (t.dtype() == DType::F32) {
      for (double v : t.data()) {
        const float f = static_cast<float>(v);
        out.append(reinterpret_cast<const char*>(&f), sizeof f);
      }
    } else {
      out.append(reinterpret_cast<const char*>(t.ptr()), t.size() * sizeof(double));
    }
  }
  return out;
}

ParamSet decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "DEQC") != 0) {
    throw BadMagicError("checkpoint: bad magic (expected \"DEQC\")");
  }
  const std::string body = bytes.substr(4);
  io::Reader in(body);
  std::uint32_t version = 0, count = 0;
  if (!in.u32(version)) throw TruncatedCheckpointError("checkpoint: truncated before version");
  if (version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint: version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  }
  if (!in.u32(count)) throw TruncatedCheckpointError("checkpoint: truncated before entry count");

  ParamSet params;
  for (std::uint32_t e = 0; e < count; ++e) {
    std::string label = "entry " + std::to_string(e);
    auto truncated = [&](const char* where) {
      return TruncatedCheckpointError("checkpoint: " + label + " truncated in " + where);
    };
    std::uint32_t name_len = 0;
    if (!in.u32(name_len)) throw truncated("name length");
    if (name_len > in.remaining()) throw truncated("name");
    std::string name(name_len, '\0');
    in.bytes(name.data(), name_len);
    label += " '" + name + "'";
    std::uint8_t code = 0;
    std::uint32_t rank = 0;
    if (!in.u8(code)) throw truncated("dtype");
    if (code > 1) throw CheckpointError("checkpoint: " + label + " has unknown dtype code " + std::to_string(code));
    if (!in.u32(rank)) throw truncated("rank");
    if (rank > in.remaining() / 4) throw truncated("dims");
    Shape shape(rank);
    std::size_t elements = 1;
    for (auto& d : shape) {
      std::uint32_t v = 0;
      in.u32(v);
      d = v;
      if (v != 0 && elements > in.remaining() / v) throw truncated("data");
      elements *= v;
    }
    const DType dtype = static_cast<DType>(code);
    const std::size_t width = dtype == DType::F32 ? sizeof(float) : sizeof(double);
    if (elements > in.remaining() / width) throw truncated("data");
    std::vector<double> values(elements);
    if (dtype == DType::F32) {
      for (double& v : values) {
        float f = 0;
        in.bytes(&f, sizeof f);
        v = f;
      }
    } else {
      in.bytes(values.data(), elements * sizeof(double));
    }
    if (params.contains(name)) throw CheckpointError("checkpoint: " + label + " is a duplicate name");
    params.add(name, Tensor(std::move(shape), std::move(values), dtype));
  }
  if (in.remaining() != 0) {
    throw CheckpointError("checkpoint: " + std::to_string(in.remaining()) + " trailing bytes after " +
                          std::to_string(count) + " entries");
  }
  return params;
}

void save_checkpoint(const ParamSet& params, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(params));
}

ParamSet load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace deq
