// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "scalenas/error.hpp"
#include "scalenas/tensor.hpp"

namespace scalenas {

// Container layout, all integers little-endian u32:
//   "SNCKPT\0\0" | version | dtype bytes (4 or 8) | manifest length | manifest JSON
//   | entry count | per entry: key length, key, ndim, dims..., raw values
inline constexpr char kCheckpointMagic[8] = {'S', 'N', 'C', 'K', 'P', 'T', 0, 0};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
  nlohmann::json manifest = nlohmann::json::object();
  std::map<std::string, Tensor<T>> tensors;
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  unsigned char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
  out.append(reinterpret_cast<const char*>(b), sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class U>
  U get() {
    need(sizeof(U));
    unsigned char b[sizeof(U)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    if constexpr (std::endian::native == std::endian::big)
      for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <class T>
std::string encode_checkpoint(const Checkpoint<T>& ck) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, sizeof(T));
  const std::string manifest = ck.manifest.dump();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(manifest.size()));
  out += manifest;
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [key, t] : ck.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
    out += key;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (T v : t.data) detail::put_le<T>(out, v);
  }
  return out;
}

template <class T>
Checkpoint<T> decode_checkpoint(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.take(sizeof kCheckpointMagic) != std::string(kCheckpointMagic, sizeof kCheckpointMagic))
    throw IoError("not a checkpoint file");
  if (r.get<std::uint32_t>() != kCheckpointVersion) throw IoError("unsupported checkpoint version");
  if (r.get<std::uint32_t>() != sizeof(T)) throw IoError("checkpoint element type mismatch");
  Checkpoint<T> ck;
  try {
    ck.manifest = nlohmann::json::parse(r.take(r.get<std::uint32_t>()));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string key = r.take(r.get<std::uint32_t>());
    Shape shape(r.get<std::uint32_t>());
    for (auto& d : shape) d = static_cast<int>(r.get<std::uint32_t>());
    Tensor<T> t(shape);
    for (auto& v : t.data) v = r.get<T>();
    ck.tensors.emplace(std::move(key), std::move(t));
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint");
  return ck;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  write_file(path, encode_checkpoint(ck));
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  return decode_checkpoint<T>(read_file(path));
}

}  // namespace scalenas
