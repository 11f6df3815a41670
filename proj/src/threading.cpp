#include "memmamba/threading.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace memmamba::threading {

namespace {
std::atomic<int> g_threads{0};  // 0 = not yet initialized

int default_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}
}  // namespace

int threads() {
    int t = g_threads.load(std::memory_order_relaxed);
    if (t == 0) {
        t = default_threads();
        g_threads.store(t, std::memory_order_relaxed);
    }
    return t;
}

void set_threads(int n) {
    if (n < 1) n = 1;
    g_threads.store(n, std::memory_order_relaxed);
#ifdef _OPENMP
    omp_set_num_threads(n);
#endif
}

bool parallel() { return threads() > 1; }

}  // namespace memmamba::threading
