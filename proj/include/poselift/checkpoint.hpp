#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "poselift/common.hpp"
#include "poselift/tensor.hpp"

namespace poselift {

// Checkpoint format: magic "PGN2", u32 version=1, u32 tensor count; per
// tensor: u16 name length, UTF-8 name, u8 rank, u64 dims, little-endian f64
// payload. Round-trips are bit-exact.

namespace detail_ckpt {

inline void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& buf, uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    if (pos + n > buf.size())
      throw data_error("checkpoint: " + path + " is truncated");
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint16_t u16() {
    need(2);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos++])) << (8 * i);
    return v;
  }
};

}  // namespace detail_ckpt

inline void save_checkpoint(
    const std::string& path,
    const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::string buf;
  buf += "PGN2";
  detail_ckpt::put_u32(buf, 1);
  detail_ckpt::put_u32(buf, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xffff)
      throw data_error("checkpoint: tensor name too long: " + name);
    detail_ckpt::put_u16(buf, static_cast<uint16_t>(name.size()));
    buf += name;
    buf.push_back(static_cast<char>(t.rank()));
    for (int64_t d : t.shape())
      detail_ckpt::put_u64(buf, static_cast<uint64_t>(d));
    for (double v : t.data())
      detail_ckpt::put_u64(buf, std::bit_cast<uint64_t>(v));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("checkpoint: cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw data_error("checkpoint: write failed for " + path);
}

struct RawTensor {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<double> data;
};

inline std::vector<RawTensor> load_checkpoint_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  detail_ckpt::Reader r{buf, 0, path};
  r.need(4);
  if (buf.compare(0, 4, "PGN2") != 0)
    throw data_error("checkpoint: " + path + " has bad magic");
  r.pos = 4;
  uint32_t version = r.u32();
  if (version != 1)
    throw data_error("checkpoint: " + path + " has unsupported version " +
                     std::to_string(version));
  uint32_t count = r.u32();
  std::vector<RawTensor> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    RawTensor t;
    uint16_t name_len = r.u16();
    r.need(name_len);
    t.name = buf.substr(r.pos, name_len);
    r.pos += name_len;
    uint8_t rank = r.u8();
    int64_t numel = 1;
    for (uint8_t d = 0; d < rank; ++d) {
      int64_t dim = static_cast<int64_t>(r.u64());
      t.shape.push_back(dim);
      numel *= dim;
    }
    t.data.reserve(static_cast<size_t>(numel));
    for (int64_t k = 0; k < numel; ++k)
      t.data.push_back(std::bit_cast<double>(r.u64()));
    out.push_back(std::move(t));
  }
  return out;
}

// Loads by exact name match into an existing registry. Unknown names in the
// file and names missing from it are both errors, listed explicitly.
inline void load_checkpoint_into(
    const std::string& path,
    std::vector<std::pair<std::string, Tensor>>& registry) {
  std::vector<RawTensor> raw = load_checkpoint_raw(path);
  auto find_raw = [&raw](const std::string& name) -> const RawTensor* {
    for (const RawTensor& t : raw)
      if (t.name == name) return &t;
    return nullptr;
  };
  // Validate everything before mutating any tensor.
  std::string unknown, missing;
  for (const RawTensor& t : raw) {
    bool found = false;
    for (auto& [name, dst] : registry)
      if (name == t.name) {
        found = true;
        break;
      }
    if (!found) unknown += (unknown.empty() ? "" : ", ") + t.name;
  }
  for (auto& [name, dst] : registry) {
    const RawTensor* src = find_raw(name);
    if (!src) {
      missing += (missing.empty() ? "" : ", ") + name;
      continue;
    }
    if (src->shape != dst.shape())
      throw data_error("checkpoint: tensor " + name + " has shape " +
                       detail::shape_str(src->shape) + ", model expects " +
                       detail::shape_str(dst.shape()));
  }
  if (!unknown.empty())
    throw data_error("checkpoint: unknown tensors in " + path + ": " + unknown);
  if (!missing.empty())
    throw data_error("checkpoint: " + path + " is missing tensors: " + missing);
  for (auto& [name, dst] : registry) dst.data() = find_raw(name)->data;
}

}  // namespace poselift
