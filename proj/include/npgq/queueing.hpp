#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "npgq/mdp.hpp"
#include "npgq/state_space.hpp"

namespace npgq {

enum class EnvKind { SingleQueue, TwoQueueJsq };

/// Rate-control queueing environment. Rates are per unit time; the kernel is
/// the uniformized DTMC at rate `uniformization_rate()`.
struct EnvSpec {
  EnvKind kind = EnvKind::SingleQueue;
  double arrival_rate = 0.45;
  std::vector<double> service_rates{0.5, 0.8};
  std::vector<double> action_costs{1.0, 10.0};
  int buffer = 20;
  /// Charge the rate cost c_i on an empty queue too.
  bool idle_cost = false;
  std::optional<double> uniformization;

  int queues() const noexcept { return kind == EnvKind::SingleQueue ? 1 : 2; }

  double max_service_rate() const {
    double m = 0;
    for (double mu : service_rates) m = std::max(m, mu);
    return m;
  }

  /// Smallest admissible rate: arrival plus every queue serving at full speed.
  double minimal_uniformization() const { return arrival_rate + queues() * max_service_rate(); }

  double uniformization_rate() const { return uniformization.value_or(minimal_uniformization()); }

  void validate() const {
    if (!(arrival_rate > 0)) throw Error("arrival rate must be positive");
    if (service_rates.empty()) throw Error("need at least one service rate");
    if (service_rates.size() != action_costs.size()) throw Error("one action cost per service rate");
    for (double mu : service_rates)
      if (!(mu > 0)) throw Error("service rates must be positive");
    for (double c : action_costs)
      if (!(c >= 0)) throw Error("action costs must be nonnegative");
    if (buffer < 1) throw Error("buffer must be at least 1");
    if (uniformization_rate() < minimal_uniformization() - 1e-12)
      throw Error("uniformization rate " + std::to_string(uniformization_rate()) + " is below the total event rate " +
                  std::to_string(minimal_uniformization()));
  }

  /// Non-fatal stability remarks (the truncated chain is always positive recurrent).
  std::vector<std::string> warnings() const {
    std::vector<std::string> out;
    if (arrival_rate >= queues() * max_service_rate())
      out.push_back("arrival rate exceeds total maximal service rate; the untruncated system is unstable");
    return out;
  }
};

/// Joint action = one service-rate index per queue; the first queue is the most significant digit.
class ActionSpace {
 public:
  ActionSpace(int queues, int rates) : queues_(queues), rates_(rates) {
    size_ = 1;
    for (int j = 0; j < queues; ++j) size_ *= rates;
  }

  Index size() const noexcept { return size_; }
  int queues() const noexcept { return queues_; }
  int rates() const noexcept { return rates_; }

  std::vector<int> decode(Index a) const {
    std::vector<int> r(static_cast<std::size_t>(queues_));
    for (int j = queues_ - 1; j >= 0; --j) {
      r[static_cast<std::size_t>(j)] = static_cast<int>(a % rates_);
      a /= rates_;
    }
    return r;
  }

  Index encode(const std::vector<int>& r) const {
    Index a = 0;
    for (int v : r) a = a * rates_ + v;
    return a;
  }

 private:
  int queues_;
  int rates_;
  Index size_;
};

template <typename Scalar>
struct QueueingEnv {
  EnvSpec spec;
  StateSpace space;
  ActionSpace actions;
  MarkovKernel<Scalar> kernel;
  CostModel<Scalar> cost;
};

/**
 * Builds the uniformized kernel for K parallel queues with JSQ routing
 * (K = 1 degenerates to a single birth-death queue). In each step:
 *   - an arrival w.p. Lambda/Gamma joins the shortest queue (ties: lowest index)
 *     and is dropped if that queue is full;
 *   - queue j completes a job w.p. mu_{a_j}/Gamma when nonempty;
 *   - otherwise the state is unchanged.
 * Cost is ||q||_1 plus c_{a_j} for every queue j (only nonempty ones unless idle_cost).
 */
template <typename Scalar = double>
QueueingEnv<Scalar> build_env(const EnvSpec& spec) {
  spec.validate();
  const int K = spec.queues();
  const int R = static_cast<int>(spec.service_rates.size());
  StateSpace space(std::vector<int>(static_cast<std::size_t>(K), spec.buffer));
  ActionSpace actions(K, R);
  const double gamma = spec.uniformization_rate();
  const Scalar arrive = static_cast<Scalar>(spec.arrival_rate / gamma);

  KernelBuilder<Scalar> kb(space.size(), actions.size());
  Table<Scalar> c(space.size(), actions.size());
  for (Index i = 0; i < space.size(); ++i) {
    const QueueState q = space.decode(i);
    int shortest = 0;
    for (int j = 1; j < K; ++j)
      if (q[j] < q[shortest]) shortest = j;
    for (Index a = 0; a < actions.size(); ++a) {
      const auto r = actions.decode(a);
      Scalar stay = 1;
      if (q[shortest] < spec.buffer) {
        QueueState next = q;
        ++next[shortest];
        kb.add(i, a, space.encode(next), arrive);
        stay -= arrive;
      }
      Scalar cost = static_cast<Scalar>(q.sum());
      for (int j = 0; j < K; ++j) {
        const auto rj = static_cast<std::size_t>(r[static_cast<std::size_t>(j)]);
        if (q[j] > 0) {
          QueueState next = q;
          --next[j];
          const Scalar depart = static_cast<Scalar>(spec.service_rates[rj] / gamma);
          kb.add(i, a, space.encode(next), depart);
          stay -= depart;
        }
        if (spec.idle_cost || q[j] > 0) cost += static_cast<Scalar>(spec.action_costs[rj]);
      }
      // Rounding residue when the event rates exactly fill Gamma.
      if (stay < tolerance<Scalar>(1e-15)) stay = 0;
      kb.add(i, a, i, stay);
      c(i, a) = cost;
    }
  }
  return QueueingEnv<Scalar>{spec, std::move(space), actions, kb.build(), CostModel<Scalar>(std::move(c))};
}

template <typename Scalar = double>
QueueingEnv<Scalar> build_single_queue(double arrival, double mu1, double mu2, double c1, double c2, int buffer,
                                       bool idle_cost = false) {
  EnvSpec spec;
  spec.kind = EnvKind::SingleQueue;
  spec.arrival_rate = arrival;
  spec.service_rates = {mu1, mu2};
  spec.action_costs = {c1, c2};
  spec.buffer = buffer;
  spec.idle_cost = idle_cost;
  return build_env<Scalar>(spec);
}

template <typename Scalar = double>
QueueingEnv<Scalar> build_two_queue_jsq(double arrival, std::vector<double> rates, std::vector<double> costs,
                                        int buffer, bool idle_cost = false) {
  EnvSpec spec;
  spec.kind = EnvKind::TwoQueueJsq;
  spec.arrival_rate = arrival;
  spec.service_rates = std::move(rates);
  spec.action_costs = std::move(costs);
  spec.buffer = buffer;
  spec.idle_cost = idle_cost;
  return build_env<Scalar>(spec);
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Step {
  Index state;
  Index action;
  Scalar cost;
  Index next_state;
};

template <typename Scalar>
struct Trajectory {
  std::uint64_t seed = 0;
  std::vector<Step<Scalar>> steps;
  /// a_n drawn at q_n, so the last step also has a successor action.
  Index final_action = 0;

  std::size_t size() const noexcept { return steps.size(); }
};

namespace detail {

/// 53-bit uniform in [0, 1) straight from the engine bits; reproducible across standard libraries.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

template <typename Scalar>
Index sample_policy(const StochasticPolicy<Scalar>& policy, Index q, std::mt19937_64& rng) {
  const double u = uniform01(rng);
  double acc = 0;
  Index last = 0;
  for (Index a = 0; a < policy.actions(); ++a) {
    const double p = static_cast<double>(policy(q, a));
    if (p <= 0) continue;
    acc += p;
    last = a;
    if (u < acc) return a;
  }
  return last;
}

template <typename Scalar>
Index sample_next(const MarkovKernel<Scalar>& kernel, Index q, Index a, std::mt19937_64& rng) {
  const double u = uniform01(rng);
  double acc = 0;
  Index last = q;
  for (typename SparseRows<Scalar>::InnerIterator it(kernel.action(a), q); it; ++it) {
    if (it.value() <= 0) continue;
    acc += static_cast<double>(it.value());
    last = it.col();
    if (u < acc) return it.col();
  }
  return last;
}

}  // namespace detail

/// Rolls out n steps under `policy` from `initial`. Deterministic in `seed`.
template <typename Scalar>
Trajectory<Scalar> sample_trajectory(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost,
                                     const StochasticPolicy<Scalar>& policy, std::size_t n, std::uint64_t seed,
                                     Index initial = 0) {
  detail::check_policy_shape(kernel, policy);
  detail::check_cost_shape(kernel, cost);
  if (n == 0) throw Error("trajectory length must be at least 1");
  std::mt19937_64 rng(seed);
  Trajectory<Scalar> out;
  out.seed = seed;
  out.steps.reserve(n);
  Index q = initial;
  Index a = detail::sample_policy(policy, q, rng);
  for (std::size_t t = 0; t < n; ++t) {
    const Index next = detail::sample_next(kernel, q, a, rng);
    out.steps.push_back({q, a, cost(q, a), next});
    q = next;
    a = detail::sample_policy(policy, q, rng);
  }
  out.final_action = a;
  return out;
}

}  // namespace npgq
