#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "faar/tensor.hpp"

namespace faar {

// Little-endian binary writer/reader for checkpoints and trunk caches.
class BinWriter {
 public:
  explicit BinWriter(const std::string& path) : os_(path, std::ios::binary) {
    check_state(os_.good(), "BinWriter: cannot open " + path);
  }

  void magic(const char tag[8]) { os_.write(tag, 8); }

  template <typename T>
  void pod(T v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void doubles(const std::vector<double>& v) {
    pod<std::uint64_t>(v.size());
    os_.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }

  void bytes(const std::vector<std::uint8_t>& v) {
    pod<std::uint64_t>(v.size());
    os_.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size()));
  }

  void shape(const Shape& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    for (auto d : s) pod<std::uint64_t>(d);
  }

  void tensor(const Tensor& t) {
    check_arg(!t.is_complex(), "BinWriter: complex tensors are not persisted");
    shape(t.shape());
    doubles(t.values());
  }

  void close(const std::string& what) {
    os_.flush();
    check_state(os_.good(), "BinWriter: write failed for " + what);
  }

 private:
  std::ofstream os_;
};

class BinReader {
 public:
  explicit BinReader(const std::string& path) : is_(path, std::ios::binary), path_(path) {
    check_state(is_.good(), "BinReader: cannot open " + path);
  }

  bool magic(const char tag[8]) {
    char buf[8];
    is_.read(buf, 8);
    return is_.good() && std::string(buf, 8) == std::string(tag, 8);
  }

  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    check_state(is_.good(), "BinReader: truncated file " + path_);
    return v;
  }

  std::string str() {
    const auto n = pod<std::uint32_t>();
    std::string s(n, '\0');
    is_.read(s.data(), n);
    check_state(is_.good(), "BinReader: truncated file " + path_);
    return s;
  }

  std::vector<double> doubles() {
    const auto n = pod<std::uint64_t>();
    std::vector<double> v(n);
    is_.read(reinterpret_cast<char*>(v.data()),
             static_cast<std::streamsize>(n * sizeof(double)));
    check_state(is_.good(), "BinReader: truncated file " + path_);
    return v;
  }

  std::vector<std::uint8_t> bytes() {
    const auto n = pod<std::uint64_t>();
    std::vector<std::uint8_t> v(n);
    is_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n));
    check_state(is_.good(), "BinReader: truncated file " + path_);
    return v;
  }

  Shape shape() {
    const auto r = pod<std::uint32_t>();
    Shape s(r);
    for (auto& d : s) d = pod<std::uint64_t>();
    return s;
  }

  Tensor tensor() {
    Shape s = shape();
    return Tensor::from(s, doubles());
  }

  // Overwrites the payload of an existing tensor; shape must match.
  void tensor_into(Tensor& t) {
    Shape s = shape();
    check_state(s == t.shape(), "BinReader: tensor shape mismatch in " + path_);
    std::vector<double> v = doubles();
    std::copy(v.begin(), v.end(), t.data());
  }

 private:
  std::ifstream is_;
  std::string path_;
};

}  // namespace faar
