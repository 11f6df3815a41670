// Times the serial reference kernels against their OpenMP counterparts on
// training-sized problems and prints a speedup table.

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "memmamba/kernels.hpp"
#include "memmamba/rng.hpp"
#include "memmamba/threading.hpp"

using namespace memmamba;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm-up
    const auto start = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto end = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(end - start).count() / reps;
}

void report(const std::string& name, double flops, double serial_ms, double omp_ms,
            double max_diff) {
    std::printf("%-28s %9.3f ms %9.3f ms  %5.2fx  %8.2f GF/s  max|d|=%.2e\n", name.c_str(),
                serial_ms, omp_ms, serial_ms / omp_ms, flops / (omp_ms * 1e6), max_diff);
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, static_cast<double>(std::fabs(a[i] - b[i])));
    return m;
}

std::vector<float> randn_vec(std::int64_t n, Rng& rng) {
    std::vector<float> v(static_cast<std::size_t>(n));
    rng.fill_normal(std::span<float>(v), 0.0, 1.0);
    return v;
}

}  // namespace

int main() {
    Rng rng(1);
    const int reps = 5;
    std::printf("threads available: %d\n", threading::threads());
    std::printf("%-28s %12s %12s %7s %13s\n", "kernel", "serial", "openmp", "speedup",
                "omp rate");

    {
        const std::int64_t m = 8192, k = 96, n = 96;
        auto a = randn_vec(m * k, rng);
        auto b = randn_vec(k * n, rng);
        std::vector<float> c1(static_cast<std::size_t>(m * n)), c2(c1.size());
        const double sm = time_ms([&] { kernels::matmul_serial(a.data(), b.data(), c1.data(), m, k, n); }, reps);
        const double om = time_ms([&] { kernels::matmul_omp(a.data(), b.data(), c2.data(), m, k, n); }, reps);
        report("matmul 8192x96x96", 2.0 * m * k * n, sm, om, max_abs_diff(c1, c2));
    }

    {
        const std::int64_t B = 32, H = 16, W = 16, Ci = 48, Co = 48, kh = 3, kw = 3;
        auto x = randn_vec(B * H * W * Ci, rng);
        auto w = randn_vec(kh * kw * Ci * Co, rng);
        std::vector<float> y1(static_cast<std::size_t>(B * H * W * Co)), y2(y1.size());
        const double sm = time_ms(
            [&] {
                kernels::conv2d_nhwc_serial(x.data(), w.data(), static_cast<const float*>(nullptr), y1.data(), B, H, W, Ci,
                                            Co, kh, kw, H, W, 1, 1);
            },
            reps);
        const double om = time_ms(
            [&] {
                kernels::conv2d_nhwc_omp(x.data(), w.data(), static_cast<const float*>(nullptr), y2.data(), B, H, W, Ci, Co,
                                         kh, kw, H, W, 1, 1);
            },
            reps);
        report("conv3x3 32x16x16x48", 2.0 * B * H * W * Co * kh * kw * Ci, sm, om,
               max_abs_diff(y1, y2));
    }

    {
        const std::int64_t B = 32, L = 256, C = 48, N = 8;
        auto u = randn_vec(B * L * C, rng);
        auto delta = randn_vec(B * L * C, rng);
        for (auto& d : delta) d = 0.01f + std::fabs(d) * 0.05f;
        auto bm = randn_vec(B * L * N, rng);
        auto cm = randn_vec(B * L * N, rng);
        auto a = randn_vec(C * N, rng);
        for (auto& v : a) v = -std::fabs(v) - 0.1f;
        std::vector<float> y1(static_cast<std::size_t>(B * L * C)), y2(y1.size());
        const double sm = time_ms(
            [&] {
                kernels::scan_fwd_serial(u.data(), delta.data(), bm.data(), cm.data(), a.data(),
                                         y1.data(), B, L, C, N);
            },
            reps);
        const double om = time_ms(
            [&] {
                kernels::scan_fwd_omp(u.data(), delta.data(), bm.data(), cm.data(), a.data(),
                                      y2.data(), B, L, C, N);
            },
            reps);
        report("scan 32x256x48 (N=8)", 9.0 * B * L * C * N, sm, om, max_abs_diff(y1, y2));
    }

    return 0;
}
