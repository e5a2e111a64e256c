#pragma once

// Pool of past synthetic images for discriminator inputs.

#include <cstdint>
#include <vector>

#include "detgan/box.hpp"
#include "detgan/rng.hpp"
#include "detgan/tensor.hpp"

namespace detgan {

struct HistoryEntry {
  Tensor image;  // detached
  Box box;
};

class HistoryBuffer {
 public:
  explicit HistoryBuffer(std::size_t capacity = 50) : capacity_(capacity) {}

  /// Until full, stores and returns the pushed image. When full, returns it
  /// with probability 0.5; otherwise returns a uniformly chosen stored entry
  /// and puts the pushed image in its slot.
  HistoryEntry push(const Tensor& image, const Box& box, std::uint64_t seed) {
    HistoryEntry entry{image.detach(), box};
    if (capacity_ == 0) return entry;
    if (pool_.size() < capacity_) {
      pool_.push_back(entry);
      return entry;
    }
    Rng rng(seed);
    if (rng.bernoulli(0.5)) return entry;
    const std::size_t slot = rng.index(pool_.size());
    HistoryEntry old = pool_[slot];
    pool_[slot] = entry;
    return old;
  }

  std::size_t size() const { return pool_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::vector<HistoryEntry>& entries() const { return pool_; }

 private:
  std::size_t capacity_;
  std::vector<HistoryEntry> pool_;
};

}  // namespace detgan
