#pragma once

namespace memmamba::threading {

// Worker thread cap for the OpenMP kernels. 1 selects the serial reference
// implementations. Initialized from OMP defaults; the CLI overrides it from
// MEMMAMBA_THREADS.
int threads();
void set_threads(int n);
bool parallel();

}  // namespace memmamba::threading
