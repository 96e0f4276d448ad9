#pragma once

#include <bitgen/config.hpp>

#include <cstdint>
#include <functional>

BITGEN_NAMESPACE_BEGIN

// Upper bound on internal parallelism, read once from BITGEN_THREADS
// (default 1).
int worker_count();
void set_worker_count(int workers);

// Number of contiguous chunks parallel_for splits [0, n) into.
int chunk_count(int64_t n);

// Runs fn(begin, end, chunk) over a static partition of [0, n). The partition
// depends only on n and the worker count, so chunk-ordered reductions are
// deterministic.
void parallel_for(int64_t n, const std::function<void(int64_t, int64_t, int)>& fn);

BITGEN_NAMESPACE_END
