#pragma once

#include <cstddef>
#include <functional>

namespace xsep {

// Process-wide kernel thread count. 1 (the default) runs everything inline.
void set_num_threads(int n);
int num_threads();

// Splits [0, count) into contiguous chunks, one per worker. Every index is
// handled by exactly one worker with a fixed inner order, so results do not
// depend on the thread count; callers must only write disjoint outputs.
void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace xsep
