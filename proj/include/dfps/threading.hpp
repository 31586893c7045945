#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace dfps {

/// Run fn(i) for i in [0, n) on up to `threads` workers. Work items are
/// claimed from a shared counter; callers must write results into
/// pre-sized slots indexed by i so the output does not depend on scheduling.
inline void parallel_for(int n, const std::function<void(int)>& fn, int threads) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    };
    int count = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(count);
    for (int t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

inline int hardware_threads() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace dfps
