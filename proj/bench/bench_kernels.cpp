// Timing comparison between the naive serial conv3x3 reference and the
// OpenMP production kernels, plus a drift check so a speedup never hides a
// numerical divergence.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include "pmil/kernels.hpp"
#include "pmil/rng.hpp"

using namespace pmil;

namespace {

double seconds_per_call(const std::function<void()>& fn, int min_reps) {
    using clock = std::chrono::steady_clock;
    fn();  // warm up
    int reps = min_reps;
    for (;;) {
        const auto t0 = clock::now();
        for (int r = 0; r < reps; ++r) fn();
        const double dt = std::chrono::duration<double>(clock::now() - t0).count();
        if (dt > 0.2 || reps > (1 << 20)) return dt / reps;
        reps *= 4;
    }
}

void fill(std::vector<float>& v, Rng& rng) {
    for (auto& x : v) x = static_cast<float>(rng.gaussian(0.0, 1.0));
}

}  // namespace

int main() {
    std::printf("conv3x3 kernels: serial reference vs OpenMP (%d thread%s)\n",
                kernels::max_threads(), kernels::max_threads() == 1 ? "" : "s");
    std::printf("%-22s %12s %12s %9s %11s\n", "case (CxHxW -> C)", "serial us", "openmp us",
                "speedup", "max |diff|");

    struct Case {
        int c_in, h, w, c_out;
    };
    const Case cases[] = {
        {3, 8, 8, 32}, {32, 8, 8, 32}, {32, 16, 16, 32}, {64, 16, 16, 64}, {32, 32, 32, 32}};

    Rng rng(1, "bench");
    for (const auto& cs : cases) {
        const std::size_t nx = static_cast<std::size_t>(cs.c_in) * cs.h * cs.w;
        const std::size_t ny = static_cast<std::size_t>(cs.c_out) * cs.h * cs.w;
        const std::size_t nw = static_cast<std::size_t>(cs.c_out) * cs.c_in * 9;
        std::vector<float> x(nx), w(nw), b(cs.c_out), y_ref(ny), y_omp(ny);
        fill(x, rng);
        fill(w, rng);
        fill(b, rng);

        const double t_ref = seconds_per_call(
            [&] {
                kernels::serial::conv3x3_forward(x.data(), w.data(), b.data(), y_ref.data(),
                                                 cs.c_in, cs.h, cs.w, cs.c_out);
            },
            4);
        const double t_omp = seconds_per_call(
            [&] {
                kernels::conv3x3_forward(x.data(), w.data(), b.data(), y_omp.data(), cs.c_in,
                                         cs.h, cs.w, cs.c_out);
            },
            4);

        double diff = 0;
        for (std::size_t i = 0; i < ny; ++i)
            diff = std::max(diff, static_cast<double>(std::fabs(y_ref[i] - y_omp[i])));

        char label[64];
        std::snprintf(label, sizeof(label), "%dx%dx%d -> %d", cs.c_in, cs.h, cs.w, cs.c_out);
        std::printf("%-22s %12.2f %12.2f %8.2fx %11.2e\n", label, t_ref * 1e6, t_omp * 1e6,
                    t_ref / t_omp, diff);
        if (diff > 1e-3) {
            std::printf("FAIL: kernels disagree beyond tolerance\n");
            return 1;
        }
    }

    // backward kernels on the mid-size case
    {
        const int c = 32, h = 16, wd = 16;
        const std::size_t n = static_cast<std::size_t>(c) * h * wd;
        std::vector<float> x(n), w(static_cast<std::size_t>(c) * c * 9), gy(n);
        std::vector<float> gx_ref(n), gx_omp(n), gw_ref(w.size()), gw_omp(w.size()),
            gb_ref(c), gb_omp(c);
        fill(x, rng);
        fill(w, rng);
        fill(gy, rng);

        const double ti_ref = seconds_per_call(
            [&] {
                std::fill(gx_ref.begin(), gx_ref.end(), 0.0f);
                kernels::serial::conv3x3_backward_input(gy.data(), w.data(), gx_ref.data(), c, h,
                                                        wd, c);
            },
            4);
        const double ti_omp = seconds_per_call(
            [&] {
                std::fill(gx_omp.begin(), gx_omp.end(), 0.0f);
                kernels::conv3x3_backward_input(gy.data(), w.data(), gx_omp.data(), c, h, wd, c);
            },
            4);
        const double tp_ref = seconds_per_call(
            [&] {
                std::fill(gw_ref.begin(), gw_ref.end(), 0.0f);
                std::fill(gb_ref.begin(), gb_ref.end(), 0.0f);
                kernels::serial::conv3x3_backward_params(x.data(), gy.data(), gw_ref.data(),
                                                         gb_ref.data(), c, h, wd, c);
            },
            4);
        const double tp_omp = seconds_per_call(
            [&] {
                std::fill(gw_omp.begin(), gw_omp.end(), 0.0f);
                std::fill(gb_omp.begin(), gb_omp.end(), 0.0f);
                kernels::conv3x3_backward_params(x.data(), gy.data(), gw_omp.data(),
                                                 gb_omp.data(), c, h, wd, c);
            },
            4);

        double diff = 0;
        for (std::size_t i = 0; i < n; ++i)
            diff = std::max(diff, static_cast<double>(std::fabs(gx_ref[i] - gx_omp[i])));
        for (std::size_t i = 0; i < w.size(); ++i)
            diff = std::max(diff, static_cast<double>(std::fabs(gw_ref[i] - gw_omp[i])));
        for (int i = 0; i < c; ++i)
            diff = std::max(diff, static_cast<double>(std::fabs(gb_ref[i] - gb_omp[i])));

        std::printf("%-22s %12.2f %12.2f %8.2fx %11.2e\n", "backward_input 32^2", ti_ref * 1e6,
                    ti_omp * 1e6, ti_ref / ti_omp, 0.0);
        std::printf("%-22s %12.2f %12.2f %8.2fx %11.2e\n", "backward_params 32^2", tp_ref * 1e6,
                    tp_omp * 1e6, tp_ref / tp_omp, diff);
        if (diff > 1e-2) {
            std::printf("FAIL: backward kernels disagree beyond tolerance\n");
            return 1;
        }
    }
    return 0;
}
