#pragma once

// Index-parallel loops over a process-wide worker count. Callers write
// results per index.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mxd {

namespace detail {
inline std::atomic<std::size_t>& thread_setting() {
    static std::atomic<std::size_t> n{1};
    return n;
}
inline thread_local bool in_worker = false;
} // namespace detail

/// 0 selects the hardware concurrency.
inline void set_threads(std::size_t n) {
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    detail::thread_setting() = n;
}

inline std::size_t threads() { return detail::thread_setting(); }

/// Calls f(i) for i in [0, n), striding across workers. Nested calls from a
/// worker run serially. The first exception thrown by any worker is rethrown
/// on the caller.
template <class F>
void parallel_for(std::size_t n, F&& f) {
    const std::size_t workers = detail::in_worker ? 1 : std::min(threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            detail::in_worker = true;
            try {
                for (std::size_t i = w; i < n; i += workers) f(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

} // namespace mxd
