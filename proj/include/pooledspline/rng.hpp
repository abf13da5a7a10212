#pragma once

// Counter-based random number generation (Philox4x64-10).
//
// Replicate r of a simulation draws from the stream keyed by
// (seed, r), so serial and parallel schedules produce identical variates.

#include <array>
#include <cmath>
#include <cstdint>

namespace pooledspline {

namespace detail {

inline void mulhilo64(std::uint64_t a, std::uint64_t b, std::uint64_t& hi,
                      std::uint64_t& lo) {
  unsigned __int128 p = static_cast<unsigned __int128>(a) * b;
  hi = static_cast<std::uint64_t>(p >> 64);
  lo = static_cast<std::uint64_t>(p);
}

}  // namespace detail

// The raw Philox4x64-10 bijection: 256-bit counter, 128-bit key,
// 10 rounds with the standard multipliers and Weyl key schedule.
inline std::array<std::uint64_t, 4> philox4x64(
    std::array<std::uint64_t, 4> ctr, std::array<std::uint64_t, 2> key) {
  constexpr std::uint64_t kMul0 = 0xD2E7470EE14C6C93ULL;
  constexpr std::uint64_t kMul1 = 0xCA5A826395121157ULL;
  constexpr std::uint64_t kWeyl0 = 0x9E3779B97F4A7C15ULL;
  constexpr std::uint64_t kWeyl1 = 0xBB67AE8584CAA73BULL;
  for (int round = 0; round < 10; ++round) {
    std::uint64_t hi0, lo0, hi1, lo1;
    detail::mulhilo64(kMul0, ctr[0], hi0, lo0);
    detail::mulhilo64(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

// Sequential view over one Philox stream.  Streams with distinct
// (seed, stream_id) pairs are statistically independent.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : key_{seed, stream_id} {}

  std::uint64_t next_u64() {
    if (pos_ == 4) {
      buf_ = philox4x64({block_, 0, 0, 0}, key_);
      ++block_;
      pos_ = 0;
    }
    return buf_[pos_++];
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller.  No spare is cached, so the mapping
  // from stream position to variate is stateless and reproducible.
  double normal() {
    double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

  // Uniform integer in [0, n) by 128-bit multiply-shift.
  std::uint64_t below(std::uint64_t n) {
    unsigned __int128 p = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(p >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::array<std::uint64_t, 2> key_;
  std::uint64_t block_ = 0;
  std::array<std::uint64_t, 4> buf_{};
  int pos_ = 4;
};

}  // namespace pooledspline
