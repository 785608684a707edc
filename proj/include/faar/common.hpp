#pragma once

#include <complex>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

namespace faar {

using cplx = std::complex<double>;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Argument/shape violations. The CLI maps these to exit code 1.
inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Internal state violations.
inline void check_state(bool ok, const std::string& msg) {
  if (!ok) throw std::runtime_error(msg);
}

// Training produced NaN/inf. The CLI maps this to exit code 2.
struct divergence_error : std::runtime_error {
  explicit divergence_error(const std::string& msg) : std::runtime_error(msg) {}
};

// A report/eval input file is absent. The CLI maps this to exit code 3.
struct missing_artifact_error : std::runtime_error {
  std::vector<std::string> missing;
  explicit missing_artifact_error(std::vector<std::string> files)
      : std::runtime_error(join(files)), missing(std::move(files)) {}

 private:
  static std::string join(const std::vector<std::string>& files) {
    std::string msg = "missing artifacts:";
    for (const auto& f : files) msg += " " + f;
    return msg;
  }
};

// Shortest round-trip formatting for doubles; used for all CSV output so
// identical runs produce bit-identical logs.
inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from (root, index).
inline std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
  std::uint64_t s = root ^ (0x51c6f0a4b28dd5d3ULL * (index + 1));
  return splitmix64(s);
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace faar
