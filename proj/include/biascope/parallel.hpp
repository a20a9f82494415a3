#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace biascope {

// Runs fn(i) for i in [0, n) across up to `jobs` threads. Each index writes
// its own result slot and callers aggregate the slots in index order, so the
// outcome is identical for any job count.
template <typename Fn>
void parallel_for(size_t n, int jobs, Fn&& fn) {
    if (n == 0) return;
    const size_t workers = std::min<size_t>(n, jobs < 1 ? 1 : static_cast<size_t>(jobs));
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

template <typename T, typename Fn>
std::vector<T> parallel_map(size_t n, int jobs, Fn&& fn) {
    std::vector<T> out(n);
    parallel_for(n, jobs, [&](size_t i) { out[i] = fn(i); });
    return out;
}

}  // namespace biascope
