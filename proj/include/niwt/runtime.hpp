#pragma once

namespace niwt {

// Process-wide settings for long numeric runs; call once at startup.
// Keeps large buffers on the heap instead of mmap/munmap per allocation, and
// caps OpenMP workers when `threads` > 0.
void configure_runtime(int threads = 0);

}  // namespace niwt
