#pragma once

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace trace_diag {

// Execution mode for the data-parallel kernels. `serial` is the reference
// path kept for tests and the kernel benchmark; `parallel` runs the same
// blocked loops under OpenMP.
enum class exec { serial, parallel };

namespace detail {
constexpr std::int64_t kBlock = 4096;
}

// Blocked sum with a fixed association order: per-block partials are
// accumulated left to right and then combined in block order, so the result
// is bit-identical for both exec modes and for any OpenMP thread count.
// `term(i)` must be pure.
template <typename F>
double blocked_sum(std::int64_t n, exec mode, F&& term) {
    if (n <= 0) return 0.0;
    const std::int64_t nblocks = (n + detail::kBlock - 1) / detail::kBlock;
    std::vector<double> partial(static_cast<std::size_t>(nblocks), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (mode == exec::parallel && nblocks > 1)
#endif
    for (std::int64_t b = 0; b < nblocks; ++b) {
        const std::int64_t lo = b * detail::kBlock;
        const std::int64_t hi = std::min(n, lo + detail::kBlock);
        double acc = 0.0;
        for (std::int64_t i = lo; i < hi; ++i) acc += term(i);
        partial[static_cast<std::size_t>(b)] = acc;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

// Parallel loop over disjoint slots; bodies must not share mutable state.
template <typename F>
void parallel_for(std::int64_t n, exec mode, F&& body) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (mode == exec::parallel && n > 1)
#endif
    for (std::int64_t i = 0; i < n; ++i) body(i);
}

inline int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace trace_diag
