// Times the OpenMP kernels against their serial reference paths and checks
// that both produce bit-identical results.
#include <Eigen/Dense>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "trace_diag/attention.hpp"
#include "trace_diag/geometry.hpp"
#include "trace_diag/parallel.hpp"
#include "trace_diag/rng.hpp"
#include "trace_diag/synth.hpp"

using namespace trace_diag;

namespace {

int g_mismatches = 0;

template <typename F>
double time_best_of(int reps, F&& fn) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const double s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        best = std::min(best, s);
    }
    return best;
}

void row(const std::string& name, double serial_s, double parallel_s, bool identical) {
    if (!identical) ++g_mismatches;
    std::printf("%-22s serial %8.4fs   parallel %8.4fs   speedup %5.2fx   %s\n", name.c_str(),
                serial_s, parallel_s, serial_s / parallel_s,
                identical ? "bit-identical" : "MISMATCH");
}

Eigen::MatrixXd random_matrix(int n, int d, std::uint64_t seed) {
    rng r(seed);
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) x(i, j) = r.normal();
    return x;
}

}  // namespace

int main() {
    std::printf("kernel benchmark, %d thread(s)\n\n", thread_count());

    {
        const std::int64_t n = 40'000'000;
        auto term = [](std::int64_t i) {
            const double v = static_cast<double>(i % 9973) * 1e-4;
            return v * v - 0.3 * v;
        };
        double rs = 0.0, rp = 0.0;
        const double ts = time_best_of(3, [&] { rs = blocked_sum(n, exec::serial, term); });
        const double tp = time_best_of(3, [&] { rp = blocked_sum(n, exec::parallel, term); });
        row("blocked_sum", ts, tp, std::memcmp(&rs, &rp, sizeof rs) == 0);
    }

    {
        const Eigen::MatrixXd x = random_matrix(4000, 256, 1);
        double rs = 0.0, rp = 0.0;
        const double ts = time_best_of(3, [&] { rs = effective_rank(x, exec::serial); });
        const double tp = time_best_of(3, [&] { rp = effective_rank(x, exec::parallel); });
        row("effective_rank", ts, tp, std::memcmp(&rs, &rp, sizeof rs) == 0);
    }

    {
        const Eigen::MatrixXd x = random_matrix(4000, 192, 2);
        const Eigen::MatrixXd y = random_matrix(4000, 160, 3);
        double rs = 0.0, rp = 0.0;
        const double ts = time_best_of(3, [&] { rs = linear_cka(x, y, exec::serial); });
        const double tp = time_best_of(3, [&] { rp = linear_cka(x, y, exec::parallel); });
        row("linear_cka", ts, tp, std::memcmp(&rs, &rp, sizeof rs) == 0);
    }

    {
        attention_plant spec;
        spec.layers = 4;
        spec.steps = 8;
        spec.heads = 8;
        spec.queries = 64;
        spec.group_sizes = {{cond_group::text, 96}, {cond_group::query, 32},
                            {cond_group::vision, 64}};
        spec.shares = {{cond_group::text, 0.5}, {cond_group::query, 0.3},
                       {cond_group::vision, 0.2}};
        spec.rank_shuffle = true;
        spec.seed = 4;
        const attention_trace tr = plant_attention(spec);
        double rs = 0.0, rp = 0.0;
        const double ts = time_best_of(3, [&] {
            rs = group_share(tr, cond_group::text, exec::serial) + head_jaccard(tr, 16, exec::serial);
        });
        const double tp = time_best_of(3, [&] {
            rp = group_share(tr, cond_group::text, exec::parallel) +
                 head_jaccard(tr, 16, exec::parallel);
        });
        row("attention kernels", ts, tp, std::memcmp(&rs, &rp, sizeof rs) == 0);
    }

    if (g_mismatches > 0) {
        std::printf("\n%d kernel(s) diverged between exec modes\n", g_mismatches);
        return 1;
    }
    return 0;
}
