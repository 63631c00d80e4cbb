// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>

namespace bt {

// Worker count for internal parallel loops. Reads BT_THREADS once; falls back
// to the hardware concurrency. Always >= 1.
int thread_count();

// Overrides the worker count (0 restores the environment/hardware default).
void set_thread_count(int n);

// Runs fn(i) for i in [0, n). Iterations are distributed in contiguous chunks;
// fn must not write to state shared across iterations.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace bt
