#pragma once

// Deterministic data-parallel helpers.
//
// Work is cut into fixed-size chunks whose boundaries do not depend on the
// thread count; partial results are reduced in chunk order. Results are
// therefore identical for any number of threads.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace varexp {

inline std::atomic<int>& default_thread_count() {
    static std::atomic<int> threads{1};
    return threads;
}

inline void set_thread_count(int n) { default_thread_count() = std::max(1, n); }

/// Calls body(begin, end) for consecutive chunks of [0, n).
template <class Body>
void parallel_for_chunks(std::size_t n, std::size_t chunk, Body&& body,
                         int threads = default_thread_count()) {
    if (n == 0) return;
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t num_chunks = (n + chunk - 1) / chunk;
    const auto workers = static_cast<std::size_t>(
        std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, num_chunks));
    if (workers == 1) {
        for (std::size_t c = 0; c < num_chunks; ++c) body(c * chunk, std::min(n, (c + 1) * chunk));
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t c = next++; c < num_chunks; c = next++) {
                body(c * chunk, std::min(n, (c + 1) * chunk));
            }
        });
    }
}

/// Ordered sum of f(i) over [0, n): per-chunk partial sums, reduced left to right.
template <class F>
double parallel_sum(std::size_t n, F&& f, std::size_t chunk = 4096,
                    int threads = default_thread_count()) {
    if (n == 0) return 0.0;
    const std::size_t num_chunks = (n + chunk - 1) / chunk;
    std::vector<double> partial(num_chunks, 0.0);
    parallel_for_chunks(
        n, chunk,
        [&](std::size_t b, std::size_t e) {
            double s = 0.0;
            for (std::size_t i = b; i < e; ++i) s += f(i);
            partial[b / chunk] = s;
        },
        threads);
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

}  // namespace varexp
