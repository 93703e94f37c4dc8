#pragma once

#include "rearrange/nn.hpp"

namespace rearrange {

// Versioned binary checkpoint:
//   magic "STKF" | u32 version | u64 config digest | u32 record count
//   per record:  u32 name len | name bytes | u32 rank | u64 dims[rank] |
//                float32 payload (little endian)
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(reinterpret_cast<char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const std::string& s, size_t& off) {
  if (off + sizeof(T) > s.size()) fail("checkpoint: truncated file");
  T v;
  std::memcpy(&v, s.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const nn::ParamSet& params,
                            uint64_t config_digest) {
  std::string out;
  out.append("STKF");
  detail::put_le<uint32_t>(out, kCheckpointVersion);
  detail::put_le<uint64_t>(out, config_digest);
  detail::put_le<uint32_t>(out, uint32_t(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.names()[i];
    const Tensor& t = params.tensors()[i];
    detail::put_le<uint32_t>(out, uint32_t(name.size()));
    out.append(name);
    detail::put_le<uint32_t>(out, uint32_t(t.rank()));
    for (int d = 0; d < t.rank(); ++d) detail::put_le<uint64_t>(out, uint64_t(t.dim(d)));
    out.append(reinterpret_cast<const char*>(t.values().data()),
               t.values().size() * sizeof(float));
  }
  atomic_write_file(path, out);
}

struct CheckpointHeader {
  uint32_t version = 0;
  uint64_t config_digest = 0;
};

inline CheckpointHeader load_checkpoint(const std::filesystem::path& path,
                                        nn::ParamSet& params) {
  const std::string s = read_file(path);
  size_t off = 0;
  if (s.size() < 4 || s.compare(0, 4, "STKF") != 0)
    fail("checkpoint: bad magic in " + path.string());
  off = 4;
  CheckpointHeader hdr;
  hdr.version = detail::get_le<uint32_t>(s, off);
  if (hdr.version != kCheckpointVersion)
    fail("checkpoint: version " + std::to_string(hdr.version) + " unsupported");
  hdr.config_digest = detail::get_le<uint64_t>(s, off);
  const uint32_t count = detail::get_le<uint32_t>(s, off);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = detail::get_le<uint32_t>(s, off);
    if (off + name_len > s.size()) fail("checkpoint: truncated name");
    std::string name = s.substr(off, name_len);
    off += name_len;
    const uint32_t rank = detail::get_le<uint32_t>(s, off);
    Shape shape;
    size_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      uint64_t dim = detail::get_le<uint64_t>(s, off);
      shape.push_back(int(dim));
      numel *= size_t(dim);
    }
    if (off + numel * sizeof(float) > s.size()) fail("checkpoint: truncated payload for " + name);
    std::vector<float> values(numel);
    std::memcpy(values.data(), s.data() + off, numel * sizeof(float));
    off += numel * sizeof(float);
    params.put(name, Tensor::from(shape, std::move(values), true));
  }
  if (off != s.size()) fail("checkpoint: trailing bytes");
  return hdr;
}

}  // namespace rearrange
