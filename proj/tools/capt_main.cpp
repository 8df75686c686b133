#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "captlab/cli.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Gradient buffers are freed and reallocated every step; keep them on the
  // heap instead of round-tripping through mmap.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 256 << 20);
#endif
  const std::vector<std::string> args(argv + 1, argv + argc);
  return captlab::cli::dispatch(args, std::cout, std::cerr);
}
