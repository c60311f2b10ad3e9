#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include "misod/core/tensor.hpp"

namespace misod {

// Named-tensor container: the on-disk format for backbone weights and
// checkpoints. Little-endian throughout.
//
//   magic   "MISODTEN"
//   u32     version (1)
//   u32     metadata entry count, then per entry: u32 key len, key bytes,
//           u32 value len, value bytes (sorted by key)
//   u32     tensor count, then per tensor: u32 name len, name bytes,
//           u32 dtype (0 = f32, 1 = f64), 4 x i32 dims (n,c,h,w),
//           raw element data (sorted by name)

namespace detail {

constexpr char kTensorMagic[8] = {'M', 'I', 'S', 'O', 'D', 'T', 'E', 'N'};
constexpr std::uint32_t kTensorVersion = 1;

template <typename T>
struct DtypeCode;
template <>
struct DtypeCode<float> {
  static constexpr std::uint32_t value = 0;
};
template <>
struct DtypeCode<double> {
  static constexpr std::uint32_t value = 1;
};

inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t read_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw LoadError("truncated container while reading " + what);
  return v;
}
inline std::int32_t read_i32(std::istream& is, const std::string& what) {
  std::int32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw LoadError("truncated container while reading " + what);
  return v;
}
inline std::string read_str(std::istream& is, const std::string& what) {
  const std::uint32_t len = read_u32(is, what + " length");
  std::string s(len, '\0');
  is.read(s.data(), len);
  if (!is) throw LoadError("truncated container while reading " + what);
  return s;
}

}  // namespace detail

template <typename T>
struct NamedTensors {
  std::map<std::string, std::string> meta;
  std::map<std::string, Tensor<T>> tensors;

  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw LoadError("cannot open for writing: " + path.string());
    os.write(detail::kTensorMagic, 8);
    detail::write_u32(os, detail::kTensorVersion);
    detail::write_u32(os, static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      detail::write_str(os, k);
      detail::write_str(os, v);
    }
    detail::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      detail::write_str(os, name);
      detail::write_u32(os, detail::DtypeCode<T>::value);
      detail::write_i32(os, t.n());
      detail::write_i32(os, t.c());
      detail::write_i32(os, t.h());
      detail::write_i32(os, t.w());
      os.write(reinterpret_cast<const char*>(t.data()),
               static_cast<std::streamsize>(t.numel() * sizeof(T)));
    }
    if (!os) throw LoadError("write failed: " + path.string());
  }

  static NamedTensors load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open: " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kTensorMagic, 8) != 0)
      throw LoadError("not a misod tensor container: " + path.string());
    const auto version = detail::read_u32(is, "version");
    if (version != detail::kTensorVersion)
      throw LoadError("unsupported container version " +
                      std::to_string(version));
    NamedTensors out;
    const auto meta_count = detail::read_u32(is, "metadata count");
    for (std::uint32_t i = 0; i < meta_count; ++i) {
      std::string k = detail::read_str(is, "metadata key");
      out.meta[k] = detail::read_str(is, "metadata value for " + k);
    }
    const auto tensor_count = detail::read_u32(is, "tensor count");
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
      std::string name = detail::read_str(is, "tensor name");
      const auto dtype = detail::read_u32(is, "dtype of " + name);
      const int n = detail::read_i32(is, "dims of " + name);
      const int c = detail::read_i32(is, "dims of " + name);
      const int h = detail::read_i32(is, "dims of " + name);
      const int w = detail::read_i32(is, "dims of " + name);
      if (n < 0 || c < 0 || h < 0 || w < 0)
        throw LoadError("negative dimension in tensor " + name);
      Tensor<T> t(n, c, h, w);
      if (dtype == detail::DtypeCode<T>::value) {
        is.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(T)));
      } else if (dtype == detail::DtypeCode<float>::value) {
        // f32 payload promoted into a wider build (pretrained weights are
        // always stored as f32)
        std::vector<float> buf(t.numel());
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        for (std::size_t j = 0; j < buf.size(); ++j)
          t[j] = static_cast<T>(buf[j]);
      } else {
        throw LoadError("tensor " + name + " has unsupported dtype code " +
                        std::to_string(dtype));
      }
      if (!is) throw LoadError("truncated tensor data for " + name);
      out.tensors.emplace(std::move(name), std::move(t));
    }
    return out;
  }
};

}  // namespace misod
