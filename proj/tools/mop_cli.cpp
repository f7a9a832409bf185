#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "mop/commands.hpp"

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Large activation buffers otherwise go through mmap and fault on every step.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  std::vector<std::string> args(argv + 1, argv + argc);
  return mop::run_cli(args, std::cout, std::cerr);
}
