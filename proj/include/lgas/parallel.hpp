#pragma once

#include <cstdint>

#include <omp.h>

namespace lgas {

// Every batch kernel exists in two flavors: a plain serial loop (the
// reference) and an OpenMP loop. Both write results into preallocated
// per-index slots and all reductions happen afterwards in index order, so
// the two flavors are bit-identical for any thread count.
enum class Exec { serial, openmp };

template <class F>
void parallel_for(Exec ex, int64_t n, F&& body) {
  if (ex == Exec::serial) {
    for (int64_t i = 0; i < n; ++i) body(i);
    return;
  }
#pragma omp parallel for schedule(dynamic, 1)
  for (int64_t i = 0; i < n; ++i) body(i);
}

inline int max_workers() { return omp_get_max_threads(); }

inline void set_workers(int n) {
  if (n > 0) omp_set_num_threads(n);
}

}  // namespace lgas
