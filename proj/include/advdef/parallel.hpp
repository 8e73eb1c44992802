#pragma once

#include <cstddef>
#include <functional>

namespace advdef {

/// Worker count to use: `requested` (0 means hardware concurrency), capped by
/// the ADVDEF_THREADS environment variable when set.
std::size_t resolve_threads(std::size_t requested);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Indices are handed
/// out dynamically; callers write results by index so output order does not
/// depend on scheduling. The first exception thrown is rethrown after all
/// workers finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

/// Raises the allocator's mmap and trim thresholds so large tensor buffers
/// are reused instead of being mapped and unmapped on every op. Call once at
/// program start; a no-op outside glibc.
void tune_allocator();

}  // namespace advdef
