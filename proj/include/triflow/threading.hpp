#pragma once

#include <cstdint>
#include <functional>

namespace triflow {

// Number of worker threads parallel_for may use. Defaults to the hardware
// concurrency, capped by the TRIFLOW_THREADS environment variable when set.
int thread_count();

// Override the worker count for the rest of the process (values < 1 clamp to 1).
void set_thread_count(int n);

// Runs body(begin, end) over a partition of [0, n). Each index lands in exactly
// one chunk, so results are identical for any worker count as long as chunks
// only write to their own indices.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

}  // namespace triflow
