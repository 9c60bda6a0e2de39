#include "graftkit/runtime.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace graftkit {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

int configure_threads() {
  int threads = 1;
  if (const char* env = std::getenv("GRAFTKIT_THREADS"); env && *env) {
    std::size_t used = 0;
    try {
      threads = std::stoi(env, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != std::string(env).size() || threads < 1) {
      throw std::invalid_argument(std::string("GRAFTKIT_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  Eigen::setNbThreads(threads);
  return threads;
}

}  // namespace graftkit
