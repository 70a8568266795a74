#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "pit/tensor.hpp"

// Little-endian binary helpers shared by the dataset, checkpoint and model
// formats.

namespace pit::binio {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot open " + path.string() + " for writing");
  }

  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out_) throw Error("write failed: " + path_.string());
  }

  void u8(std::uint8_t v) { bytes(&v, 1); }

  void u64(std::uint64_t v) {
    v = to_little(v);
    bytes(&v, sizeof v);
  }

  void f64(std::span<const double> values) {
    for (double v : values) {
      const auto le = to_little(std::bit_cast<std::uint64_t>(v));
      bytes(&le, sizeof le);
    }
  }

  void close() {
    out_.close();
    if (!out_) throw Error("write failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path)
      : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open " + path.string() + " for reading");
  }

  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!in_) throw Error("unexpected end of file: " + path_.string());
  }

  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }

  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return to_little(v);
  }

  std::vector<double> f64(std::size_t count) {
    std::vector<double> out(count);
    for (double& v : out) {
      std::uint64_t raw;
      bytes(&raw, sizeof raw);
      v = std::bit_cast<double>(to_little(raw));
    }
    return out;
  }

  bool at_end() {
    return in_.peek() == std::char_traits<char>::eof();
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace pit::binio
