#pragma once

#include <cstdint>
#include <string_view>

namespace svam::rng {

uint64_t fnv1a(const void* data, size_t n, uint64_t h = 14695981039346656037ull);
uint64_t fnv1a(std::string_view s, uint64_t h = 14695981039346656037ull);
uint64_t mix64(uint64_t x);

// Counter-based generator. Every stochastic site in the project owns a
// Stream derived from (seed, site name[, index]); draws never interact
// across streams, so adding a new site does not perturb the others.
class Stream {
 public:
  Stream() : key_(0) {}
  Stream(uint64_t seed, std::string_view name);

  Stream child(std::string_view name, uint64_t index = 0) const;

  uint64_t u64();
  double uniform();                  // [0, 1)
  double uniform(double lo, double hi);
  int uniform_int(int lo, int hi);   // inclusive bounds
  double normal();                   // standard normal, Box-Muller

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
  double cached_normal_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace svam::rng
