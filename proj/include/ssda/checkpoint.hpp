#pragma once

// Binary checkpoint of a student/teacher pair.
//
//   "SSDACKPT" | version u32 | count u32 | count x tensor
//   tensor: name_len u16 | name bytes | rank u8 | rank x dim u64 | dtype u8 (0 = f32) | f32 data
//
// All integers and floats little-endian. Names are prefixed "student." or
// "teacher.".

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/model.hpp"
#include "ssda/params.hpp"

namespace ssda {

inline constexpr std::string_view kCheckpointMagic = "SSDACKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<long>(pos_), bytes_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint truncated");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= std::uint64_t(bytes_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

template <class T>
void write_tensors(ByteWriter& w, const std::string& prefix, const ParamSet<T>& p) {
  for (const auto& [name, e] : p) {
    const std::string full = prefix + name;
    if (full.size() > 0xffff) throw ArgumentError("parameter name too long: " + full);
    w.u16(static_cast<std::uint16_t>(full.size()));
    w.raw(full);
    w.u8(static_cast<std::uint8_t>(e.value.rank()));
    for (std::size_t d : e.value.shape()) w.u64(d);
    w.u8(0);
    for (T v : e.value.data()) w.f32(static_cast<float>(v));
  }
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> encode_checkpoint(const ModelPair<T>& pair) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(pair.student.size() + pair.teacher.size()));
  detail::write_tensors(w, "student.", pair.student);
  detail::write_tensors(w, "teacher.", pair.teacher);
  return w.bytes();
}

/// Trainable flags are restored from the naming convention: entries whose
/// names end in running_mean / running_var are buffers.
template <class T>
ModelPair<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < kCheckpointMagic.size() || r.raw(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw DataError("not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  ModelPair<T> pair;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.raw(r.u16());
    Shape shape(r.u8());
    for (auto& d : shape) d = r.u64();
    if (r.u8() != 0) throw DataError("unsupported dtype for " + name);
    std::vector<T> values(numel_of(shape));
    for (auto& v : values) v = static_cast<T>(r.f32());
    auto ends_with = [&](std::string_view s) {
      return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    const bool trainable = !(ends_with("running_mean") || ends_with("running_var"));
    Tensor<T> t(std::move(shape), std::move(values));
    if (name.rfind("student.", 0) == 0) {
      pair.student.add(name.substr(8), std::move(t), trainable);
    } else if (name.rfind("teacher.", 0) == 0) {
      pair.teacher.add(name.substr(8), std::move(t), trainable);
      pair.teacher.entry(name.substr(8)).value.set_requires_grad(false);
    } else {
      throw DataError("checkpoint tensor without student/teacher prefix: " + name);
    }
  }
  if (!r.done()) throw DataError("trailing bytes in checkpoint");
  check_compatible(pair.student, pair.teacher);
  return pair;
}

inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path);
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <class T>
void save_checkpoint(const ModelPair<T>& pair, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(pair));
}

template <class T>
ModelPair<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(read_file_bytes(path));
}

/// FNV-1a over the encoded bytes; identifies the checkpoint that produced a
/// pseudolabel set.
inline std::uint64_t content_hash(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ssda
