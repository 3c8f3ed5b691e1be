#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <new>

namespace fens::memory {

// Process-wide accounting of tensor storage. Every Tensor buffer goes through
// TrackingAllocator, so these counters cover parameters, activations and
// gradients but nothing else.
struct Counters {
  std::atomic<std::int64_t> current{0};
  std::atomic<std::int64_t> peak{0};
};

Counters& counters();

inline std::int64_t current_bytes() { return counters().current.load(); }
inline std::int64_t peak_bytes() { return counters().peak.load(); }

// Resets the peak to the current level and returns that level.
std::int64_t reset_peak();

void note_alloc(std::size_t bytes);
void note_free(std::size_t bytes);

template <class T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <class U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
    note_alloc(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    note_free(n * sizeof(T));
    ::operator delete(p);
  }

  template <class U>
  bool operator==(const TrackingAllocator<U>&) const noexcept {
    return true;
  }
};

// Resident set size of this process in bytes, or -1 when /proc is unavailable.
std::int64_t resident_bytes();

}  // namespace fens::memory
