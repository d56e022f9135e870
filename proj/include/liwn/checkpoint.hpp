#pragma once

// Binary checkpoints: "LIWN", u32 version, u32 tensor count, then per tensor
// u16 name length, name bytes, u8 rank, u32 extents, f32 payload; a trailing
// CRC32 of everything before it. All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "liwn/error.hpp"
#include "liwn/filters.hpp"
#include "liwn/nn.hpp"
#include "liwn/tensor.hpp"

namespace liwn {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'L', 'I', 'W', 'N'};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, p_ + at_, sizeof(U));
    at_ += sizeof(U);
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* q = p_ + at_;
    at_ += n;
    return q;
  }
  std::size_t remaining() const { return n_ - at_; }

 private:
  void need(std::size_t k) const {
    if (at_ + k > n_) throw FormatError("checkpoint truncated");
  }
  const std::uint8_t* p_;
  std::size_t n_, at_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, std::uint32_t(tensors.size()));
  std::set<std::string> seen;
  for (const auto& t : tensors) {
    if (!seen.insert(t.name).second) throw FormatError("duplicate tensor name " + t.name);
    if (t.name.empty() || t.name.size() > 0xffff) throw FormatError("bad tensor name length");
    if (t.value.rank() == 0 || t.value.rank() > 255) throw FormatError("bad tensor rank for " + t.name);
    detail::put<std::uint16_t>(out, std::uint16_t(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back(std::uint8_t(t.value.rank()));
    for (auto d : t.value.dims()) {
      if (d > 0xffffffffu) throw FormatError("extent too large in " + t.name);
      detail::put<std::uint32_t>(out, std::uint32_t(d));
    }
    for (float v : t.value.values()) detail::put<float>(out, v);
  }
  detail::put<std::uint32_t>(out, crc32_bytes(out.data(), out.size()));
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw FormatError("not a checkpoint (bad magic)");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc32_bytes(bytes.data(), bytes.size() - 4) != stored) throw FormatError("checkpoint CRC mismatch");
  detail::Reader r(bytes.data() + 4, bytes.size() - 8);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = r.get<std::uint16_t>();
    const auto* name = r.take(len);
    t.name.assign(reinterpret_cast<const char*>(name), len);
    if (!seen.insert(t.name).second) throw FormatError("duplicate tensor name " + t.name);
    const auto rank = r.get<std::uint8_t>();
    if (rank == 0) throw FormatError("zero-rank tensor " + t.name);
    Shape dims(rank);
    for (auto& d : dims) d = r.get<std::uint32_t>();
    const std::size_t n = shape_size(dims);
    if (n * 4 > r.remaining()) throw FormatError("checkpoint truncated");
    std::vector<float> data(n);
    std::memcpy(data.data(), r.take(n * 4), n * 4);
    t.value = Tensor<float>(dims, std::move(data));
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after the last tensor");
  return out;
}

/// Writes via a temporary file and rename, so a failed save leaves no file.
inline void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), std::streamsize(n));
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  write_file_atomic(path, bytes.data(), bytes.size());
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

inline const NamedTensor* find_tensor(const std::vector<NamedTensor>& ts, const std::string& name) {
  for (const auto& t : ts)
    if (t.name == name) return &t;
  return nullptr;
}

/// Parameters, buffers and (optionally) optimizer velocities as "<param>.velocity".
template <typename T>
std::vector<NamedTensor> network_state(Network<T>& net, bool with_velocity) {
  std::vector<NamedTensor> out;
  for (auto* p : net.params()) {
    out.push_back({p->name, p->value.template cast<float>()});
    if (with_velocity) out.push_back({p->name + ".velocity", p->velocity.template cast<float>()});
  }
  for (auto& b : net.buffers()) out.push_back({b.name, b.value->template cast<float>()});
  return out;
}

/// Loads every parameter and buffer by name; velocities when present.
template <typename T>
void restore_network_state(Network<T>& net, const std::vector<NamedTensor>& ts) {
  auto assign = [&](const std::string& name, Tensor<T>& dst, bool required) {
    const NamedTensor* t = find_tensor(ts, name);
    if (!t) {
      if (required) throw FormatError("checkpoint lacks tensor " + name);
      return;
    }
    if (t->value.dims() != dst.dims())
      throw FormatError("tensor " + name + " has extents " + shape_str(t->value.dims()) + ", model expects " +
                        shape_str(dst.dims()));
    dst = t->value.template cast<T>();
  };
  for (auto* p : net.params()) {
    assign(p->name, p->value, true);
    assign(p->name + ".velocity", p->velocity, false);
  }
  for (auto& b : net.buffers()) assign(b.name, *b.value, true);
}

}  // namespace liwn
