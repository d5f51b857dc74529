#pragma once

#include <functional>

namespace indexfuse {

/// Runs fn(0..count-1) on up to `threads` workers. Tasks must write only to
/// their own slot of any shared output so results are independent of
/// scheduling; reductions over task outputs are done serially by the caller.
/// The first exception thrown by any task is rethrown after all workers join.
void parallel_for(int count, int threads, const std::function<void(int)>& fn);

/// Worker count: explicit request, or INDEXFUSE_THREADS, or hardware parallelism.
int resolve_threads(int requested);

}  // namespace indexfuse
