#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace cmargin {

/// Number of workers to use when the caller passes 0.
inline std::size_t default_jobs() {
    const auto hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : hw;
}

/// Runs body(k) for k in [0, count) on up to `jobs` threads. Each index is
/// visited exactly once; callers write results into preallocated slots so
/// output never depends on scheduling. The first exception (lowest index)
/// is rethrown after all workers stop.
inline void parallel_for(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& body) {
    if (jobs == 0) jobs = default_jobs();
    jobs = std::min(jobs, count);
    if (jobs <= 1) {
        for (std::size_t k = 0; k < count; ++k) body(k);
        return;
    }
    std::mutex mu;
    std::size_t next = 0;
    std::size_t failed_at = count;
    std::exception_ptr failure;
    auto worker = [&] {
        for (;;) {
            std::size_t k;
            {
                std::lock_guard lock(mu);
                if (next >= count || failure) return;
                k = next++;
            }
            try {
                body(k);
            } catch (...) {
                std::lock_guard lock(mu);
                if (k < failed_at) {
                    failed_at = k;
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace cmargin
