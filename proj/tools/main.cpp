#include "cli.hpp"

#include <malloc.h>

int main(int argc, char** argv) {
  // Activation buffers are large and short-lived; keep them on the heap
  // instead of paying an mmap/munmap round trip per tensor.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return spiralscope::run_cli(argc, argv);
}
