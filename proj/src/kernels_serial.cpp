#include <cmath>
#include <limits>

#include "fibermap/error.hpp"
#include "fibermap/kernels.hpp"

namespace fibermap::kernels::serial {

#define FIBERMAP_PARALLEL_FOR
#include "kernels_impl.inc"
#undef FIBERMAP_PARALLEL_FOR

}  // namespace fibermap::kernels::serial
