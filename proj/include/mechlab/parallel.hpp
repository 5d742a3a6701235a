#pragma once

// Minimal fork-join helper. Work items write only to their own index, so
// results are deterministic regardless of thread count; SUDOKU_MECHLAB_THREADS
// caps the pool (default: hardware concurrency).

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace mechlab {

inline int max_threads() {
    if (const char* env = std::getenv("SUDOKU_MECHLAB_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

template <class F>
void parallel_for(std::size_t n, F&& fn, int threads = 0) {
    if (threads <= 0) threads = max_threads();
    if (threads == 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (static_cast<std::size_t>(threads) > n) threads = static_cast<int>(n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = static_cast<std::size_t>(w); i < n;
                 i += static_cast<std::size_t>(threads))
                fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace mechlab
