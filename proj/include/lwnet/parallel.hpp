#pragma once

#include <functional>

namespace lwnet {

/// Worker count used by intra-op loops. 1 (the default) runs everything on
/// the calling thread. Results do not depend on this value: parallel loops
/// only split independent work items and reductions happen in index order.
void set_num_threads(int n);
int num_threads();

/// Runs fn(i) for i in [0, count), split over num_threads() workers.
void parallel_for(int count, const std::function<void(int)>& fn);

}  // namespace lwnet
