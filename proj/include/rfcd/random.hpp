/*
   Copyright 2026 The rfcd Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

// Counter-based random numbers (Philox4x32-10, Salmon et al. SC'11).
//
// Every draw is a pure function of (seed, stream id, position), so any
// sample chunk can be regenerated independently of which thread runs it.
// Stream ids carry a purpose tag in the top 16 bits and a chunk / entity
// index in the low 48 bits.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include <Eigen/Dense>

namespace rfcd {

using Philox4x32Counter = std::array<std::uint32_t, 4>;
using Philox4x32Key = std::array<std::uint32_t, 2>;

inline Philox4x32Counter philox4x32_10(Philox4x32Counter ctr, Philox4x32Key key) {
  constexpr std::uint32_t kM0 = 0xD2511F53u;
  constexpr std::uint32_t kM1 = 0xCD9E8D57u;
  constexpr std::uint32_t kW0 = 0x9E3779B9u;
  constexpr std::uint32_t kW1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kW0;
      key[1] += kW1;
    }
    const std::uint64_t p0 = std::uint64_t{kM0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kM1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

// Purpose tags for substreams. Values are part of the reproducibility
// contract; append, never renumber.
enum class StreamPurpose : std::uint16_t {
  kFeatures = 1,
  kTeacherData = 2,
  kTeacherNoise = 3,
  kConstantsOuter = 4,
  kConstantsStein = 5,
  kConstantsMu1 = 6,
  kFlowSamples = 7,
  kMomentMc = 8,
  kOracleData = 9,
  kOracleIncrements = 10,
  kDecompositionRows = 11,
  kCoefficientMc = 12,
  kStudentInit = 13,
  kHutchinson = 14,
  kTest = 0xFFFF,
};

constexpr std::uint64_t stream_id(StreamPurpose purpose, std::uint64_t index = 0) {
  return (std::uint64_t{static_cast<std::uint16_t>(purpose)} << 48) |
         (index & ((std::uint64_t{1} << 48) - 1));
}

class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream)
      : key_{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)},
        stream_(stream) {}

  RandomStream(std::uint64_t seed, StreamPurpose purpose, std::uint64_t index = 0)
      : RandomStream(seed, stream_id(purpose, index)) {}

  std::uint32_t next_u32() {
    if (lane_ == 4) refill();
    return buffer_[lane_++];
  }

  // Uniform on the open interval (0, 1) with 53 random bits.
  double uniform() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    const std::uint64_t bits = ((hi << 32) | lo) >> 11;
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller; the sine branch is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  // Fills in storage (column-major) order.
  template <typename Derived>
  void fill_normal(Eigen::DenseBase<Derived>& out) {
    for (Eigen::Index j = 0; j < out.cols(); ++j)
      for (Eigen::Index i = 0; i < out.rows(); ++i) out(i, j) = normal();
  }

  template <typename Derived>
  void fill_normal(Eigen::DenseBase<Derived>&& out) {
    fill_normal(out);
  }

  std::uint64_t stream() const noexcept { return stream_; }

 private:
  void refill() {
    buffer_ = philox4x32_10({static_cast<std::uint32_t>(block_), static_cast<std::uint32_t>(block_ >> 32),
                             static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                            key_);
    ++block_;
    lane_ = 0;
  }

  Philox4x32Key key_;
  std::uint64_t stream_;
  std::uint64_t block_ = 0;
  Philox4x32Counter buffer_{};
  int lane_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rfcd
