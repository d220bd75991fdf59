#pragma once

// "MRGW" parameter files: magic, u32 version, u32 array count, then per array
// u32 name length, UTF-8 name, u32 rank, u32 extents and a float32 payload.
// Every integer and float is little-endian.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mrgan/error.hpp"
#include "mrgan/tensor.hpp"

namespace mrgan {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    require(pos_ + n <= bytes_.size(), ErrorCode::format, "unexpected end of data");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedArray>& arrays) {
  std::vector<std::uint8_t> out{'M', 'R', 'G', 'W'};
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    require(shape_numel(a.shape) == a.values.size(), ErrorCode::shape_mismatch,
            "array '" + a.name + "' payload does not match its shape");
    detail::put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    detail::put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto e : a.shape) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : a.values) detail::put_f32(out, v);
  }
  return out;
}

inline std::vector<NamedArray> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  require(in.str(4) == "MRGW", ErrorCode::format, "not an MRGW checkpoint");
  const std::uint32_t version = in.u32();
  require(version == kCheckpointVersion, ErrorCode::format,
          "unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = in.u32();
  std::vector<NamedArray> arrays;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray a;
    a.name = in.str(in.u32());
    const std::uint32_t rank = in.u32();
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(in.u32());
    a.values.resize(shape_numel(a.shape));
    for (auto& v : a.values) v = in.f32();
    arrays.push_back(std::move(a));
  }
  require(in.done(), ErrorCode::format, "trailing bytes after last array");
  return arrays;
}

/// Writes to a sibling temp file and renames over the target, so readers never
/// observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot open " + tmp.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorCode::io, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
  write_file_atomic(path, encode_checkpoint(arrays));
}

inline std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

template <class T>
NamedArray to_named_array(const std::string& name, const Tensor<T>& t) {
  NamedArray a{name, t.shape(), {}};
  a.values.reserve(t.numel());
  for (T v : t.data()) a.values.push_back(static_cast<float>(v));
  return a;
}

/// Copies a stored array into an existing tensor after checking its shape.
template <class T>
void assign_from(Tensor<T>& t, const NamedArray& a) {
  require(a.shape == t.shape(), ErrorCode::shape_mismatch,
          "checkpoint array '" + a.name + "' has shape " + shape_str(a.shape) + ", expected " +
              shape_str(t.shape()));
  auto dst = t.mutable_data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a.values[i]);
}

}  // namespace mrgan
