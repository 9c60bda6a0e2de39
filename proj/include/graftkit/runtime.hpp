#pragma once

namespace graftkit {

// Keeps large freed blocks in the heap instead of returning them to the OS.
// Training allocates and frees the same activation sizes every step, so the
// default glibc thresholds turn each step into a stream of page faults.
void tune_allocator();

// Reads GRAFTKIT_THREADS (default 1) and applies it to the linear-algebra backend.
// Throws std::invalid_argument on a non-positive or malformed value.
int configure_threads();

}  // namespace graftkit
