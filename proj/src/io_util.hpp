// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "echoedm/error.hpp"

namespace echoedm::io {

inline std::uint32_t crc32_bytes(const void* data, std::size_t n, std::uint32_t crc = 0) {
  const auto* p = static_cast<const Bytef*>(data);
  uLong c = crc;
  // zlib takes uInt lengths
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

/// Appends values as little-endian bytes.
template <class T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

template <class T>
void put_le_span(std::vector<std::uint8_t>& out, std::span<const T> v) {
  if constexpr (std::endian::native == std::endian::little) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
    out.insert(out.end(), p, p + v.size_bytes());
  } else {
    for (const T& e : v) put_le(out, e);
  }
}

/// Sequential little-endian reader over a byte buffer.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint8_t b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }

  template <class T>
  void get_span(std::span<T> out) {
    need(out.size_bytes());
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
      pos_ += out.size_bytes();
    } else {
      for (T& e : out) e = get<T>();
    }
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError(what_ + ": truncated file");
  }
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto n = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> buf(n);
  if (n && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
    throw IoError("cannot read " + p.string());
  return buf;
}

inline std::string read_text(const std::filesystem::path& p) {
  const auto b = read_file(p);
  return std::string(b.begin(), b.end());
}

/// Writes through a temporary file and renames, so readers never observe a
/// partial file.
inline void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const auto tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + p.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, p, ec);
  if (ec) throw IoError("cannot rename " + tmp + ": " + ec.message());
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  write_file(p, {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

inline std::string hex32(std::uint32_t v) {
  char b[9];
  std::snprintf(b, sizeof b, "%08x", v);
  return b;
}

inline std::uint32_t parse_hex32(const std::string& s) {
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(s, &used, 16);
    if (used != s.size() || v > 0xffffffffUL) throw std::invalid_argument(s);
    return static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
    throw IoError("malformed checksum '" + s + "'");
  }
}

}  // namespace echoedm::io
