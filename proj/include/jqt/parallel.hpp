#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace jqt {

/// Process-wide worker count used by the tile-parallel kernels. Affects
/// speed only; every kernel produces identical bytes for any value.
void set_num_threads(int n);
int num_threads();

/// Runs fn(task, worker) for task in [0, n). Tasks are dealt to workers in
/// contiguous static ranges, so worker w always sees the same tasks.
void parallel_for(std::size_t n, const std::function<void(std::size_t task, int worker)>& fn);

/// Number of workers parallel_for will use for n tasks.
int workers_for(std::size_t n);

}  // namespace jqt
