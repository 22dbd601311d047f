#pragma once

// Counter-based Gaussian streams.
//
// Every normal variate is a pure function of (master_seed, path_index,
// purpose, index). The generator is Philox4x32-10 (Salmon et al., SC'11):
//   key     = master_seed split into two 32-bit words (low, high)
//   counter = {block_lo, block_hi, path_lo, (purpose << 28) | path_hi[0:28]}
// where block = index / 2. Each Philox block yields four 32-bit words, turned
// into two uniforms on (0,1) with 53 bits each:
//   u1 = ((w0 << 21) ^ (w1 >> 11) + 0.5) * 2^-53,  u2 likewise from (w2, w3)
// and then into two normals by Box-Muller:
//   z0 = sqrt(-2 ln u1) cos(2 pi u2)   (even index)
//   z1 = sqrt(-2 ln u1) sin(2 pi u2)   (odd index)
// Golden files depend on exactly this recipe.

#include "tamed_sde/errors.hpp"
#include "tamed_sde/linalg.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace tamed_sde {

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
    const std::uint64_t p0 = static_cast<std::uint64_t>(kM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

enum class StreamPurpose : std::uint32_t {
  kIncrement = 0,  // Brownian increments of the simulated path
  kAuxiliary = 1,  // independent copies, e.g. an uncoupled reference ensemble
  kSampling = 2,   // point sampling for certificate and envelope checks
};

struct SeedSpec {
  std::uint64_t master_seed = 0;
  std::uint64_t path_index = 0;
  StreamPurpose purpose = StreamPurpose::kIncrement;
};

/// Random-access view of one stream. Stateless; cheap to copy.
class CounterStream {
 public:
  explicit CounterStream(SeedSpec seed)
      : key_{static_cast<std::uint32_t>(seed.master_seed),
             static_cast<std::uint32_t>(seed.master_seed >> 32)},
        path_lo_(static_cast<std::uint32_t>(seed.path_index)),
        path_hi_((static_cast<std::uint32_t>(seed.purpose) << 28) |
                 (static_cast<std::uint32_t>(seed.path_index >> 32) & 0x0FFFFFFFu)) {}

  Philox4x32Counter block(std::uint64_t block_index) const {
    return philox4x32_10({static_cast<std::uint32_t>(block_index),
                          static_cast<std::uint32_t>(block_index >> 32), path_lo_, path_hi_},
                         key_);
  }

  /// Two uniforms on the open interval (0, 1) from one block.
  std::array<double, 2> uniform_pair(std::uint64_t block_index) const {
    const auto w = block(block_index);
    return {to_unit(w[0], w[1]), to_unit(w[2], w[3])};
  }

  double uniform(std::uint64_t index) const { return uniform_pair(index / 2)[index % 2]; }

  double normal(std::uint64_t index) const {
    const auto [u1, u2] = uniform_pair(index / 2);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return (index % 2 == 0) ? r * std::cos(angle) : r * std::sin(angle);
  }

  /// out[i] = normal(first + i).
  void fill_normals(std::uint64_t first, std::span<double> out) const {
    std::size_t i = 0;
    std::uint64_t index = first;
    if (index % 2 == 1 && i < out.size()) {
      out[i++] = normal(index++);
    }
    for (; i + 1 < out.size(); i += 2, index += 2) {
      const auto [u1, u2] = uniform_pair(index / 2);
      const double r = std::sqrt(-2.0 * std::log(u1));
      const double angle = 2.0 * std::numbers::pi * u2;
      out[i] = r * std::cos(angle);
      out[i + 1] = r * std::sin(angle);
    }
    if (i < out.size()) out[i] = normal(index);
  }

 private:
  static double to_unit(std::uint32_t a, std::uint32_t b) {
    const std::uint64_t bits = (static_cast<std::uint64_t>(a) << 21) ^ (b >> 11);
    return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
  }

  Philox4x32Key key_;
  std::uint32_t path_lo_;
  std::uint32_t path_hi_;
};

/// Row-major step_count x dim array of increments.
class IncrementPath {
 public:
  IncrementPath() = default;
  IncrementPath(int steps, int dim) : steps_(steps), dim_(dim), data_(std::size_t(steps) * dim) {}

  int steps() const { return steps_; }
  int dim() const { return dim_; }
  std::span<double> row(int k) { return {data_.data() + std::size_t(k) * dim_, std::size_t(dim_)}; }
  std::span<const double> row(int k) const {
    return {data_.data() + std::size_t(k) * dim_, std::size_t(dim_)};
  }
  Vec increment(int k) const {
    Vec v(dim_);
    for (int i = 0; i < dim_; ++i) v(i) = data_[std::size_t(k) * dim_ + i];
    return v;
  }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  void resize(int steps, int dim) {
    steps_ = steps;
    dim_ = dim;
    data_.resize(std::size_t(steps) * dim);
  }

 private:
  int steps_ = 0;
  int dim_ = 0;
  std::vector<double> data_;
};

/// Fills `out` (already sized) with N(0, dt) increments from the stream.
/// Increment k, coordinate i uses normal index k * dim + i.
inline void fill_gaussian_increments(const SeedSpec& seed, double dt, IncrementPath& out) {
  if (!(dt > 0.0)) throw ArgumentError("gaussian_increments: dt must be > 0");
  CounterStream stream(seed);
  stream.fill_normals(0, out.data());
  const double scale = std::sqrt(dt);
  for (double& v : out.data()) v *= scale;
}

inline IncrementPath gaussian_increments(const SeedSpec& seed, int step_count, double dt,
                                         int dim) {
  if (step_count < 1) throw ArgumentError("gaussian_increments: step_count must be >= 1");
  if (dim < 1) throw ArgumentError("gaussian_increments: dim must be >= 1");
  IncrementPath out(step_count, dim);
  fill_gaussian_increments(seed, dt, out);
  return out;
}

/// coarse[k] = fine[k r] + ... + fine[(k+1) r - 1], summed left to right.
inline void aggregate_increments(const IncrementPath& fine, int ratio, IncrementPath& coarse) {
  if (ratio < 1) throw ArgumentError("aggregate_increments: ratio must be >= 1");
  if (fine.steps() % ratio != 0) {
    throw ArgumentError("aggregate_increments: length " + std::to_string(fine.steps()) +
                        " not divisible by ratio " + std::to_string(ratio));
  }
  const int dim = fine.dim();
  coarse.resize(fine.steps() / ratio, dim);
  for (int k = 0; k < coarse.steps(); ++k) {
    auto dst = coarse.row(k);
    for (int i = 0; i < dim; ++i) {
      double acc = 0.0;
      for (int j = k * ratio; j < (k + 1) * ratio; ++j) acc += fine.row(j)[i];
      dst[i] = acc;
    }
  }
}

inline IncrementPath aggregate_increments(const IncrementPath& fine, int ratio) {
  IncrementPath coarse;
  aggregate_increments(fine, ratio, coarse);
  return coarse;
}

/// Uniform point in [0,1]^dim; point index p uses uniforms p*dim .. p*dim+dim-1.
inline Vec unit_cube_point(const CounterStream& stream, std::uint64_t point_index, int dim) {
  Vec u(dim);
  for (int i = 0; i < dim; ++i) u(i) = stream.uniform(point_index * dim + i);
  return u;
}

}  // namespace tamed_sde
