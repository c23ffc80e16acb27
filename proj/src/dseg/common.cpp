#include "dseg/common.hpp"

#include <omp.h>

#include <cstdlib>

namespace dseg {

namespace {
int resolve_default_threads() {
  if (const char* env = std::getenv("DSEG_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return omp_get_max_threads();
}
int g_threads = 0;
}  // namespace

void set_thread_count(int n) {
  g_threads = n >= 1 ? n : 0;
  omp_set_num_threads(g_threads > 0 ? g_threads : resolve_default_threads());
}

int thread_count() {
  if (g_threads == 0) omp_set_num_threads(resolve_default_threads());
  return g_threads > 0 ? g_threads : resolve_default_threads();
}

}  // namespace dseg
