// Little-endian primitive I/O shared by the dataset and checkpoint formats.
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "bflow/core.hpp"

namespace bflow::io {

template <class T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
}

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), os_(path, std::ios::binary | std::ios::trunc) {
    if (!os_) throw ArtifactError("cannot open for writing: " + path);
  }

  template <class T>
  void put(T v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  template <class T>
  void put_array(std::span<const T> v) {
    if constexpr (std::endian::native == std::endian::little) {
      os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size_bytes()));
    } else {
      for (T e : v) put(e);
    }
  }

  void put_bytes(const void* p, std::size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

  void pad_to(std::size_t offset) {
    const auto pos = static_cast<std::size_t>(os_.tellp());
    for (std::size_t i = pos; i < offset; ++i) os_.put('\0');
  }

  void close() {
    os_.flush();
    if (!os_) throw ArtifactError("write failed: " + path_);
    os_.close();
  }

 private:
  std::string path_;
  std::ofstream os_;
};

/// Reads a whole file and hands out typed fields, naming the field in every
/// truncation error.
class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw ArtifactError("missing artifact: " + path);
    const auto size = static_cast<std::size_t>(is.tellg());
    is.seekg(0);
    data_.resize(size);
    is.read(reinterpret_cast<char*>(data_.data()), static_cast<std::streamsize>(size));
    if (!is) throw LoadError(path + ": read failed");
  }

  std::size_t size() const { return data_.size(); }
  std::size_t offset() const { return pos_; }
  void seek(std::size_t pos) { pos_ = pos; }

  template <class T>
  T get(const char* field) {
    require(sizeof(T), field);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }

  template <class T>
  std::vector<T> get_array(std::size_t n, const char* field) {
    require(n * sizeof(T), field);
    std::vector<T> out(n);
    if (n) std::memcpy(out.data(), data_.data() + pos_, n * sizeof(T));
    if constexpr (std::endian::native != std::endian::little)
      for (auto& e : out) e = to_little(e);
    pos_ += n * sizeof(T);
    return out;
  }

  std::span<const unsigned char> bytes(std::size_t n, const char* field) {
    require(n, field);
    auto s = std::span<const unsigned char>(data_).subspan(pos_, n);
    pos_ += n;
    return s;
  }

  const std::string& path() const { return path_; }

 private:
  void require(std::size_t n, const char* field) const {
    if (pos_ > data_.size() || data_.size() - pos_ < n)
      throw LoadError(path_ + ": truncated file while reading field '" + field + "'");
  }

  std::string path_;
  std::vector<unsigned char> data_;
  std::size_t pos_ = 0;
};

}  // namespace bflow::io
