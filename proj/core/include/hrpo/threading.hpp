// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

namespace hrpo {

// Runs fn(i) for i in [0, n). With threads <= 1 everything runs inline;
// otherwise indices are striped across workers. fn must be safe to call
// concurrently for distinct indices.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

// Rollout worker cap: HRPO_THREADS when set, hardware concurrency otherwise.
int default_thread_count();

}  // namespace hrpo
