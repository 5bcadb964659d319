#pragma once

// Little-endian framing helpers shared by the checkpoint, pool and dataset containers.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "gz/error.hpp"

namespace gz::detail {

class LeWriter {
 public:
  explicit LeWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError(path, "cannot open for writing");
  }

  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError(path_, "write failed");
  }
  template <typename T>
  void put(T v) {
    static_assert(std::is_integral_v<T> || std::is_same_v<T, float>);
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    bytes(b, sizeof(T));
  }
  void str(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void close() {
    out_.close();
    if (!out_) throw IoError(path_, "close failed");
  }

 private:
  std::string path_;
  std::ofstream out_;
};

class LeReader {
 public:
  explicit LeReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError(path, "cannot open for reading");
  }

  const std::string& path() const { return path_; }

  void bytes(void* p, std::size_t n, const std::string& what) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(FormatError::Kind::Truncated, "truncated " + what + " in " + path_);
    }
  }
  template <typename T>
  T get(const std::string& what) {
    unsigned char b[sizeof(T)];
    bytes(b, sizeof(T), what);
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
  std::string str(const std::string& what, std::uint32_t max_len = 1u << 20) {
    const auto n = get<std::uint32_t>(what + " length");
    if (n > max_len) {
      throw FormatError(FormatError::Kind::Malformed, what + " length " + std::to_string(n) +
                                                          " is implausible in " + path_);
    }
    std::string s(n, '\0');
    bytes(s.data(), n, what);
    return s;
  }
  void magic(const char (&expected)[5]) {
    char m[4];
    bytes(m, 4, "magic");
    if (std::memcmp(m, expected, 4) != 0) {
      throw FormatError(FormatError::Kind::BadMagic,
                        std::string("bad magic in ") + path_ + " (expected " + expected + ")");
    }
  }
  void version(std::uint32_t expected) {
    const auto v = get<std::uint32_t>("version");
    if (v != expected) {
      throw FormatError(FormatError::Kind::VersionMismatch,
                        "version mismatch in " + path_ + ": file " + std::to_string(v) +
                            ", supported " + std::to_string(expected));
    }
  }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace gz::detail
