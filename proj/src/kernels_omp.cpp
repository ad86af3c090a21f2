#include <cmath>
#include <limits>

#include "fibermap/error.hpp"
#include "fibermap/kernels.hpp"

#ifdef FIBERMAP_HAVE_OPENMP
#include <omp.h>
#endif

namespace fibermap::kernels::omp {

#ifdef FIBERMAP_HAVE_OPENMP
#define FIBERMAP_PARALLEL_FOR _Pragma("omp parallel for schedule(dynamic, 8)")
#else
#define FIBERMAP_PARALLEL_FOR
#endif
#include "kernels_impl.inc"
#undef FIBERMAP_PARALLEL_FOR

int max_threads() {
#ifdef FIBERMAP_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef FIBERMAP_HAVE_OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

}  // namespace fibermap::kernels::omp
