#pragma once

#include <cstddef>
#include <functional>

namespace q4fg {

/// Worker count for parallel kernels: Q4FG_THREADS when set to a positive
/// integer, otherwise 1.
int worker_count();

/// Splits [0, n) into at most `workers` contiguous blocks and runs `fn(begin, end)`
/// on each. Block boundaries depend only on n and workers.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace q4fg
