// Copyright Contributors to the featsplat Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace featsplat {

/// Process-wide worker count used by parallel_for. 0 selects hardware concurrency.
void set_num_threads(unsigned n);
unsigned num_threads();

/// Runs body(i) for i in [0, n). Iterations must write disjoint outputs; callers
/// reduce per-index results in index order so output never depends on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &body);

} // namespace featsplat
