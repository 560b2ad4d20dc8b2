#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace triflow {

// mt19937_64 with hand-rolled output transforms. The engine itself is
// bit-exact across platforms; the standard distributions are not, so uniform
// and normal draws are derived here to keep every seeded run reproducible.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
  }

  // Standard normal via Box-Muller; the second draw of each pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double ang = 6.283185307179586476925286766559 * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Fork a stream for an independent consumer without disturbing this one.
  Rng split() { return Rng(next_u64() ^ 0x9e3779b97f4a7c15ull); }

  // Exact engine state as text (the engine's standard decimal serialization
  // plus the cached normal draw, bit-preserved), for checkpointing.
  std::string state_string() const {
    std::ostringstream out;
    out << engine_ << ' ' << (has_spare_ ? 1 : 0) << ' ';
    std::uint64_t bits = 0;
    std::memcpy(&bits, &spare_, sizeof bits);
    out << bits;
    return out.str();
  }

  void set_state_string(const std::string& text) {
    std::istringstream in(text);
    int has = 0;
    std::uint64_t bits = 0;
    if (!(in >> engine_ >> has >> bits)) throw std::runtime_error("rng: malformed state string");
    has_spare_ = has != 0;
    std::memcpy(&spare_, &bits, sizeof spare_);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace triflow
