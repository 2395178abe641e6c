#pragma once

#include <cstddef>
#include <functional>

namespace spectract {

// Worker count, capped by SPECTRACT_THREADS when set (default: hardware cores).
unsigned worker_count();

// Runs body(i) for i in [0, n). Each index is handled by exactly one worker,
// so results written per index are independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace spectract
