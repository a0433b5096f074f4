#include "hgdlmm/threads.hpp"

#include <charconv>
#include <cstdlib>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace hgd {

int resolve_threads(int requested) {
#ifdef _OPENMP
  if (requested > 0) return requested;
  if (const char* env = std::getenv("HGDLMM_THREADS")) {
    int n = 0;
    const char* end = env + std::strlen(env);
    auto [ptr, ec] = std::from_chars(env, end, n);
    if (ec == std::errc() && ptr == end && n > 0) return n;
  }
  return omp_get_max_threads();
#else
  (void)requested;
  return 1;
#endif
}

}  // namespace hgd
