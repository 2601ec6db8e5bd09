#pragma once

#include <cstddef>
#include <functional>

namespace mocha {

// Worker count from MOCHA_THREADS (default 1). Read once per process.
std::size_t thread_count();

// Test hook; 0 restores the environment-derived value.
void set_thread_count(std::size_t n);

// Runs body(i) for i in [0, n) over contiguous chunks. Each index is handled by
// exactly one worker and bodies must not share accumulators, so results do not
// depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace mocha
