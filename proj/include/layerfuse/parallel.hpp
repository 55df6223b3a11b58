#pragma once

#include <cstddef>
#include <functional>

namespace layerfuse {

// Worker count from LAYERFUSE_THREADS (0 or unset means hardware concurrency).
std::size_t thread_budget();

// Runs fn(0..n-1) across the thread budget with a static block partition.
// Each index owns its output slot, so results are deterministic regardless
// of the worker count. Exceptions propagate to the caller.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace layerfuse
