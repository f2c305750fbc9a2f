// SPDX-License-Identifier: Apache-2.0
// Internal helpers for splitting independent work across threads.
#pragma once

#include <cstddef>
#include <functional>

namespace reseg::detail {

/// Worker count from RESEG_NUM_THREADS, else hardware concurrency.
std::size_t configured_threads();

/// Runs body(i) for i in [0, n) on up to `threads` workers. Each index is
/// processed by exactly one worker; results must not depend on scheduling.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace reseg::detail
