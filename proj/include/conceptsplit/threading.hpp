#pragma once

#include <functional>

namespace csplit {

// Worker count for embarrassingly parallel loops (batch gradients,
// independent sampling trajectories). CSPLIT_THREADS overrides; results are
// reduced in index order, so outputs do not depend on the thread count.
int default_thread_count();

void parallel_for(int n, const std::function<void(int)>& fn, int threads = 0);

}  // namespace csplit
