#pragma once

#include <malloc.h>

namespace poselift {

// Training allocates and frees the same large activation buffers every step.
// Keeping them on the heap instead of fresh mmap pages avoids refaulting and
// rezeroing megabytes per step.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
}

}  // namespace poselift
