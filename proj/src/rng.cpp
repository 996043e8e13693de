#include "svam/rng.hpp"

#include <cmath>
#include <numbers>

namespace svam::rng {

uint64_t fnv1a(const void* data, size_t n, uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t fnv1a(std::string_view s, uint64_t h) { return fnv1a(s.data(), s.size(), h); }

uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

Stream::Stream(uint64_t seed, std::string_view name) {
  key_ = mix64(mix64(seed) ^ fnv1a(name));
}

Stream Stream::child(std::string_view name, uint64_t index) const {
  Stream s;
  s.key_ = mix64(key_ ^ fnv1a(name) ^ mix64(index * 0xD1B54A32D192ED03ull + 1));
  return s;
}

uint64_t Stream::u64() { return mix64(key_ ^ mix64(++counter_)); }

double Stream::uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

double Stream::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Stream::uniform_int(int lo, int hi) {
  // Modulo bias is irrelevant at the ranges used here (task ids, indices).
  return lo + static_cast<int>(u64() % static_cast<uint64_t>(hi - lo + 1));
}

double Stream::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  double u1 = 1.0 - uniform();  // (0, 1]
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 2.0 * std::numbers::pi * u2;
  cached_normal_ = r * std::sin(a);
  has_cached_ = true;
  return r * std::cos(a);
}

}  // namespace svam::rng
