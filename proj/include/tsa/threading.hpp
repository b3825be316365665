#pragma once

#include <cstddef>
#include <functional>

namespace tsa {

// Worker cap: min(hardware threads, TSA_NUM_THREADS). Values < 1 in the
// environment variable are treated as 1.
std::size_t max_workers();

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks so the
// result is independent of the worker count; fn must be safe to call from
// multiple threads for distinct i.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace tsa
