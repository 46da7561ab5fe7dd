#pragma once

// Splittable counter-based random streams. Every stream is keyed by a list of
// integers (run seed, domain tag, step, prompt index, ...), so any worker can
// reconstruct exactly the same stream without shared state. All distributions
// are implemented by hand: std::* distributions are not bit-portable across
// standard libraries.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace grpodlab {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}
inline std::uint64_t rotl(std::uint64_t v, int k) {
  return (v << k) | (v >> (64 - k));
}
}  // namespace detail

// Stream domains, folded into the key so distinct uses never collide.
enum class RngDomain : std::uint64_t {
  ParamInit = 0x01,
  DatasetInstance = 0x02,
  PromptDraw = 0x03,
  Rollout = 0x04,
  Test = 0x7f,
};

// xoshiro256++ seeded via splitmix64 from the key material.
class RngStream {
 public:
  static RngStream from_key(std::initializer_list<std::uint64_t> ids) {
    std::uint64_t acc = 0x6a09e667f3bcc908ull;
    for (std::uint64_t id : ids) {
      acc ^= id + 0x9e3779b97f4a7c15ull + (acc << 6) + (acc >> 2);
      detail::splitmix64(acc);
    }
    RngStream r;
    for (auto& w : r.state_) w = detail::splitmix64(acc);
    return r;
  }

  static RngStream from_seed(std::uint64_t seed, RngDomain domain,
                             std::uint64_t a = 0, std::uint64_t b = 0,
                             std::uint64_t c = 0) {
    return from_key({seed, static_cast<std::uint64_t>(domain), a, b, c});
  }

  std::uint64_t next_u64() {
    std::uint64_t* s = state_;
    std::uint64_t result = detail::rotl(s[0] + s[3], 23) + s[0];
    std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = detail::rotl(s[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n), n >= 1. Lemire's multiply-shift reduction.
  std::uint32_t next_below(std::uint32_t n) {
    return static_cast<std::uint32_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Stateless: two uniforms per draw.
  double next_normal() {
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  std::uint64_t state_[4] = {};
};

}  // namespace grpodlab
