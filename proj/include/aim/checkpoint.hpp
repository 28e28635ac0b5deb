#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "aim/common.hpp"
#include "aim/params.hpp"

namespace aim {

// Self-describing named-tensor archive:
//   magic "AIMC", u32 version, u32 entry count,
//   per entry: u32 name length, name bytes, u8 dtype tag (1=f32, 2=f64),
//              u8 rank, u64 extents..., u64 payload offset,
//   then the contiguous little-endian payload.
// Offsets are relative to the start of the payload section.

namespace ckpt_detail {

constexpr char kMagic[4] = {'A', 'I', 'M', 'C'};
constexpr std::uint32_t kVersion = 1;

template <class T>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 1 : 2;
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  os.write(b, 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  os.write(b, 8);
}
inline std::uint32_t get_u32(std::istream& is) {
  char b[4];
  is.read(b, 4);
  if (!is) throw io_error("checkpoint: truncated header");
  std::uint32_t v;
  std::memcpy(&v, b, 4);
  return v;
}
inline std::uint64_t get_u64(std::istream& is) {
  char b[8];
  is.read(b, 8);
  if (!is) throw io_error("checkpoint: truncated header");
  std::uint64_t v;
  std::memcpy(&v, b, 8);
  return v;
}

}  // namespace ckpt_detail

template <class T>
void save_checkpoint(const ParamStore<T>& params, const std::string& path,
                     const std::vector<std::string>* subset = nullptr) {
  using namespace ckpt_detail;
  std::vector<std::string> names = subset ? *subset : params.names();
  if (subset) std::sort(names.begin(), names.end());

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw io_error("checkpoint: cannot open for writing: " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, std::uint32_t(names.size()));
  std::uint64_t offset = 0;
  for (const auto& name : names) {
    const Tensor<T>& t = params.at(name);
    put_u32(os, std::uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    os.put(char(dtype_tag<T>()));
    os.put(char(t.rank()));
    for (std::size_t e : t.shape()) put_u64(os, e);
    put_u64(os, offset);
    offset += t.size() * sizeof(T);
  }
  for (const auto& name : names) {
    const Tensor<T>& t = params.at(name);
    os.write(reinterpret_cast<const char*>(t.value().data()),
             std::streamsize(t.size() * sizeof(T)));
  }
  if (!os) throw io_error("checkpoint: write failed: " + path);
}

template <class T>
ParamStore<T> load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw io_error("checkpoint: bad magic in " + path);
  std::uint32_t version = get_u32(is);
  if (version != kVersion)
    throw io_error("checkpoint: unsupported version " + std::to_string(version));
  std::uint32_t count = get_u32(is);

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw io_error("checkpoint: truncated entry name");
    int tag = is.get();
    int rank = is.get();
    if (tag == EOF || rank == EOF) throw io_error("checkpoint: truncated entry header");
    if (std::uint8_t(tag) != dtype_tag<T>())
      throw io_error("checkpoint: dtype mismatch for entry '" + name + "'");
    Shape shape(static_cast<std::size_t>(rank));
    for (auto& e : shape) e = get_u64(is);
    std::uint64_t offset = get_u64(is);
    entries.push_back({std::move(name), std::move(shape), offset});
  }
  std::streampos payload_start = is.tellg();
  is.seekg(0, std::ios::end);
  std::uint64_t payload_size = std::uint64_t(is.tellg() - payload_start);

  ParamStore<T> out;
  for (auto& e : entries) {
    std::size_t n = numel(e.shape);
    if (e.offset + n * sizeof(T) > payload_size)
      throw io_error("checkpoint: truncated payload for entry '" + e.name + "'");
    std::vector<T> data(n);
    is.seekg(payload_start + std::streampos(e.offset));
    is.read(reinterpret_cast<char*>(data.data()), std::streamsize(n * sizeof(T)));
    if (!is) throw io_error("checkpoint: payload read failed for entry '" + e.name + "'");
    out.insert(e.name, Tensor<T>(e.shape, std::move(data)));
  }
  return out;
}

// Copy loaded values into a model's parameter store. Every loaded entry must
// name an existing parameter with the same shape; when require_complete, every
// model parameter must also be covered (adapter-only checkpoints use false).
template <class T>
void apply_checkpoint(ParamStore<T>& target, const ParamStore<T>& loaded,
                      bool require_complete = true) {
  std::size_t applied = 0;
  for (const auto& [name, src] : loaded) {
    if (!target.contains(name))
      throw io_error("checkpoint: unknown entry '" + name + "' for this model");
    Tensor<T>& dst = target.at(name);
    if (dst.shape() != src.shape())
      throw io_error("checkpoint: shape mismatch for '" + name + "': file " +
                     shape_str(src.shape()) + " vs model " + shape_str(dst.shape()));
    auto out = dst.mutable_value();
    auto in = src.value();
    std::copy(in.begin(), in.end(), out.begin());
    ++applied;
  }
  if (require_complete && applied != target.size())
    throw io_error("checkpoint: incomplete (covers " + std::to_string(applied) + " of " +
                   std::to_string(target.size()) + " parameters)");
}

}  // namespace aim
