#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

namespace dseg {

// Error taxonomy. Everything thrown by the engine derives from Error so the
// C API boundary can map failures onto status codes uniformly.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

class StateError : public Error {
 public:
  explicit StateError(const std::string& msg) : Error("state error: " + msg) {}
};

class TrainError : public Error {
 public:
  explicit TrainError(const std::string& msg) : Error("training error: " + msg) {}
};

// Deterministic RNG. mt19937_64 has a portable, fully specified sequence;
// the std distributions do not, so uniform/normal draws are derived from the
// raw stream explicitly. Same seed -> same values on any platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(split_seed(seed)) {}

  uint64_t next_u64() {
    // xoshiro256** step; state seeded via splitmix64.
    uint64_t& s0 = state_[0];
    uint64_t& s1 = state_[1];
    uint64_t& s2 = state_[2];
    uint64_t& s3 = state_[3];
    const uint64_t result = rotl(s1 * 5, 7) * 9;
    const uint64_t t = s1 << 17;
    s2 ^= s0;
    s3 ^= s1;
    s1 ^= s2;
    s0 ^= s3;
    s2 ^= t;
    s3 = rotl(s3, 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return n <= 1 ? 0 : static_cast<int64_t>(uniform() * static_cast<double>(n));
  }

  // Standard normal via Box-Muller, one spare cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class It>
  void shuffle(It first, It last) {
    const int64_t n = static_cast<int64_t>(last - first);
    for (int64_t i = n - 1; i > 0; --i) {
      const int64_t j = uniform_int(i + 1);
      std::swap(first[i], first[j]);
    }
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::array<uint64_t, 4> split_seed(uint64_t seed) {
    std::array<uint64_t, 4> s{};
    uint64_t z = seed;
    for (auto& v : s) {
      z += 0x9e3779b97f4a7c15ULL;
      uint64_t t = z;
      t = (t ^ (t >> 30)) * 0xbf58476d1ce4e5b9ULL;
      t = (t ^ (t >> 27)) * 0x94d049bb133111ebULL;
      v = t ^ (t >> 31);
    }
    return s;
  }

  std::array<uint64_t, 4> state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Thread-count override: explicit call wins, else DSEG_THREADS, else the
// OpenMP default. Kernels only ever parallelize over independent output
// blocks, so results do not depend on this setting.
void set_thread_count(int n);
int thread_count();

}  // namespace dseg
