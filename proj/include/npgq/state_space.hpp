#pragma once

#include <Eigen/Core>

#include <numeric>
#include <vector>

#include "npgq/error.hpp"

namespace npgq {

using Index = Eigen::Index;

/// Vector of queue lengths.
using QueueState = Eigen::VectorXi;

/**
 * Finite product space {0..B_1} x ... x {0..B_K} with a mixed-radix flat
 * index. The first queue is the most significant digit, so for two queues
 * state (q1, q2) maps to q1 * (B_2 + 1) + q2.
 */
class StateSpace {
 public:
  explicit StateSpace(std::vector<int> capacities) : capacities_(std::move(capacities)) {
    if (capacities_.empty()) throw DimensionError("state space needs at least one queue");
    size_ = 1;
    for (int b : capacities_) {
      if (b < 0) throw DimensionError("queue capacity must be nonnegative");
      size_ *= static_cast<Index>(b) + 1;
    }
  }

  Index size() const noexcept { return size_; }
  int queues() const noexcept { return static_cast<int>(capacities_.size()); }
  const std::vector<int>& capacities() const noexcept { return capacities_; }

  bool contains(const QueueState& q) const {
    if (q.size() != queues()) return false;
    for (int j = 0; j < queues(); ++j)
      if (q[j] < 0 || q[j] > capacities_[j]) return false;
    return true;
  }

  Index encode(const QueueState& q) const {
    if (!contains(q)) throw DimensionError("queue state outside the state space");
    Index i = 0;
    for (int j = 0; j < queues(); ++j) i = i * (capacities_[j] + 1) + q[j];
    return i;
  }

  QueueState decode(Index i) const {
    if (i < 0 || i >= size_) throw DimensionError("flat state index out of range");
    QueueState q(queues());
    for (int j = queues() - 1; j >= 0; --j) {
      const Index radix = capacities_[j] + 1;
      q[j] = static_cast<int>(i % radix);
      i /= radix;
    }
    return q;
  }

  /// Total number of jobs, i.e. the l1 norm of the decoded state.
  int total_jobs(Index i) const { return decode(i).sum(); }

 private:
  std::vector<int> capacities_;
  Index size_ = 0;
};

}  // namespace npgq
