#pragma once

#include <cstdint>

#include "dfps/common.hpp"

namespace dfps {

/// Counter-based random stream (Philox4x32-10).
///
/// A stream is identified by (seed, tag, id_a, id_b); draws are a pure
/// function of the stream identity and the draw index, so enlarging a batch
/// never reshuffles values already assigned to other (tag, id) pairs.
class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t tag, std::uint64_t id_a = 0,
              std::uint64_t id_b = 0);

    std::uint64_t next_u64();

    /// Uniform double in [0, 1).
    double uniform();
    /// Uniform double in [lo, hi]; exact when lo == hi.
    double uniform(double lo, double hi);
    /// Standard normal via Box-Muller.
    double gaussian();

    Vec gaussian_vec(int n);
    Mat gaussian_mat(int rows, int cols);

private:
    void refill();

    std::uint32_t key_[2];
    std::uint32_t stream_[2];
    std::uint64_t block_ = 0;
    std::uint32_t out_[4];
    int out_pos_ = 4;          // consumed
    double cached_gauss_ = 0.0;
    bool has_cached_gauss_ = false;
};

/// Stream tags; each purpose draws from its own key space.
namespace rng_tag {
inline constexpr std::uint64_t kScenario = 1;
inline constexpr std::uint64_t kInitState = 2;
inline constexpr std::uint64_t kBrownian = 3;
inline constexpr std::uint64_t kWeights = 4;
inline constexpr std::uint64_t kPolicy = 5;
inline constexpr std::uint64_t kDeviation = 6;
}  // namespace rng_tag

}  // namespace dfps
