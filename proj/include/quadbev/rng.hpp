#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace qbev {

// Deterministic RNG. Sampling helpers are hand-rolled on top of the raw
// engine so sequences do not depend on the standard library's distribution
// implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t raw() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t bounded(uint64_t n) { return n ? engine_() % n : 0; }

  int uniform_int(int lo, int hi_inclusive) {
    return lo + static_cast<int>(bounded(static_cast<uint64_t>(hi_inclusive - lo + 1)));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  std::mt19937_64 engine_;
};

// FNV-1a 64-bit; used for sequence hashing, checkpoint digests and splits.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64_str(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace qbev
