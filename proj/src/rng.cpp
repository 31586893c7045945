#include "dfps/rng.hpp"

#include <cmath>

namespace dfps {

namespace {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline void philox_round(std::uint32_t ctr[4], const std::uint32_t key[2]) {
    constexpr std::uint64_t kM0 = 0xD2511F53ULL;
    constexpr std::uint64_t kM1 = 0xCD9E8D57ULL;
    std::uint64_t p0 = kM0 * ctr[0];
    std::uint64_t p1 = kM1 * ctr[2];
    std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
    std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
    std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
    std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
    std::uint32_t c1 = ctr[1], c3 = ctr[3];
    ctr[0] = hi1 ^ c1 ^ key[0];
    ctr[1] = lo1;
    ctr[2] = hi0 ^ c3 ^ key[1];
    ctr[3] = lo0;
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t tag, std::uint64_t id_a,
                     std::uint64_t id_b) {
    std::uint64_t k = splitmix64(seed ^ splitmix64(tag));
    std::uint64_t s = splitmix64(splitmix64(id_a) ^ splitmix64(id_b ^ tag) ^ seed);
    key_[0] = static_cast<std::uint32_t>(k);
    key_[1] = static_cast<std::uint32_t>(k >> 32);
    stream_[0] = static_cast<std::uint32_t>(s);
    stream_[1] = static_cast<std::uint32_t>(s >> 32);
}

void RngStream::refill() {
    std::uint32_t ctr[4] = {static_cast<std::uint32_t>(block_),
                            static_cast<std::uint32_t>(block_ >> 32), stream_[0],
                            stream_[1]};
    std::uint32_t key[2] = {key_[0], key_[1]};
    for (int r = 0; r < 10; ++r) {
        philox_round(ctr, key);
        key[0] += 0x9E3779B9U;
        key[1] += 0xBB67AE85U;
    }
    out_[0] = ctr[0];
    out_[1] = ctr[1];
    out_[2] = ctr[2];
    out_[3] = ctr[3];
    out_pos_ = 0;
    ++block_;
}

std::uint64_t RngStream::next_u64() {
    if (out_pos_ > 2) refill();
    std::uint64_t lo = out_[out_pos_];
    std::uint64_t hi = out_[out_pos_ + 1];
    out_pos_ += 2;
    return lo | (hi << 32);
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double lo, double hi) {
    return lo + uniform() * (hi - lo);
}

double RngStream::gaussian() {
    if (has_cached_gauss_) {
        has_cached_gauss_ = false;
        return cached_gauss_;
    }
    // u1 in (0, 1] keeps the log finite.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    cached_gauss_ = r * std::sin(theta);
    has_cached_gauss_ = true;
    return r * std::cos(theta);
}

Vec RngStream::gaussian_vec(int n) {
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = gaussian();
    return v;
}

Mat RngStream::gaussian_mat(int rows, int cols) {
    Mat m(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) m(i, j) = gaussian();
    return m;
}

}  // namespace dfps
