#include "niwt/runtime.hpp"

#include <malloc.h>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace niwt {

void configure_runtime(int threads) {
#ifdef M_MMAP_THRESHOLD
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

}  // namespace niwt
