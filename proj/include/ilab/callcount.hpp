#pragma once

#include <atomic>
#include <cstdint>

// Lightweight call accounting so tests can assert stage isolation (for
// example: evaluating a stage-1 checkpoint must not enter stage-2/3 code).
namespace ilab::callcount {

enum Fn : int { kTrainStage1 = 0, kTrainStage2, kCollect, kUapoStep, kEvaluate, kFnCount };

inline std::atomic<std::uint64_t>& counter(Fn f) {
    static std::atomic<std::uint64_t> counts[kFnCount];
    return counts[f];
}

inline void bump(Fn f) { counter(f).fetch_add(1, std::memory_order_relaxed); }
inline std::uint64_t get(Fn f) { return counter(f).load(std::memory_order_relaxed); }
inline void reset() {
    for (int i = 0; i < kFnCount; ++i) counter(static_cast<Fn>(i)).store(0);
}

} // namespace ilab::callcount
