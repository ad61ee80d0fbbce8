#pragma once

#include <cstddef>
#include <functional>

namespace modicf {

// Worker count from MODICF_THREADS (default 1, invalid values fall back to 1).
std::size_t worker_threads();

// Runs body(begin, end) over contiguous chunks of [0, n). Each index is visited
// exactly once, so results are independent of the thread count when bodies only
// write to their own indices.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace modicf
