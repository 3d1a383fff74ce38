#pragma once

#include <cstddef>
#include <functional>

namespace tempcloud {

/// Worker cap read from TEMPCLOUD_THREADS. 0 (or unset on a single-core host)
/// means everything runs on the calling thread.
std::size_t thread_limit();

/// Runs body(i) for i in [0, count). Each index is visited exactly once, so
/// bodies that only write slot i produce identical results for any thread count.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

}  // namespace tempcloud
