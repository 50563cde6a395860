#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "npgq/mdp.hpp"
#include "npgq/queueing.hpp"

namespace npgq {

enum class StepKind { Fixed, AdaptiveKF2, TheoremM };

inline const char* step_kind_name(StepKind k) {
  switch (k) {
    case StepKind::Fixed: return "fixed";
    case StepKind::AdaptiveKF2: return "adaptive";
    case StepKind::TheoremM: return "theorem";
  }
  return "?";
}

struct StepSizeSchedule {
  StepKind kind = StepKind::AdaptiveKF2;
  double eta = 0;                ///< fixed
  double k = 1;                  ///< adaptive: k / max(f^2, 1)
  std::vector<double> M;         ///< theorem: one bound per state
  std::size_t horizon = 0;       ///< theorem: T
  Index actions = 2;             ///< theorem: |A|

  static StepSizeSchedule fixed(double eta) {
    StepSizeSchedule s;
    s.kind = StepKind::Fixed;
    s.eta = eta;
    return s;
  }
  static StepSizeSchedule adaptive(double k) {
    StepSizeSchedule s;
    s.kind = StepKind::AdaptiveKF2;
    s.k = k;
    return s;
  }
  static StepSizeSchedule theorem(std::vector<double> M, std::size_t horizon, Index actions) {
    StepSizeSchedule s;
    s.kind = StepKind::TheoremM;
    s.M = std::move(M);
    s.horizon = horizon;
    s.actions = actions;
    return s;
  }

  void validate() const {
    switch (kind) {
      case StepKind::Fixed:
        if (!(eta > 0)) throw Error("fixed step size eta must be positive");
        break;
      case StepKind::AdaptiveKF2:
        if (!(k > 0)) throw Error("adaptive step constant k must be positive");
        break;
      case StepKind::TheoremM:
        if (horizon == 0) throw Error("theorem step size needs a positive horizon T");
        if (actions < 2) throw Error("theorem step size needs at least two actions");
        for (double m : M)
          if (!(m > 0)) throw Error("theorem step size needs positive M_q");
        break;
    }
  }
};

/// fixed: eta; adaptive: k / max(f^2, 1); theorem: sqrt(8 ln|A| / T) / M_q
inline double step_size(const StepSizeSchedule& s, Index q, double f) {
  switch (s.kind) {
    case StepKind::Fixed: return s.eta;
    case StepKind::AdaptiveKF2: return s.k / std::max(f * f, 1.0);
    case StepKind::TheoremM:
      return std::sqrt(8.0 * std::log(static_cast<double>(s.actions)) / static_cast<double>(s.horizon)) /
             s.M.at(static_cast<std::size_t>(q));
  }
  return 0;
}

template <typename Scalar>
Vector<Scalar> step_sizes(const StepSizeSchedule& s, const Vector<Scalar>& f) {
  if (s.kind == StepKind::TheoremM && static_cast<Index>(s.M.size()) != f.size())
    throw DimensionError("theorem step size M has the wrong length");
  Vector<Scalar> eta(f.size());
  for (Index q = 0; q < f.size(); ++q) eta(q) = static_cast<Scalar>(step_size(s, q, static_cast<double>(f(q))));
  return eta;
}

/**
 * pi'(a|q) proportional to pi(a|q) exp(-eta_q Q(q,a)), evaluated as
 * pi(a|q) exp(-eta_q (Q(q,a) - min_b Q(q,b))) over the support of pi(.|q), so every
 * weight lies in (0, 1] and the minimizing action keeps weight one. Zero entries stay zero.
 * Rows whose weights are all one (eta_q = 0 or constant Q) are copied unchanged.
 */
template <typename Scalar>
StochasticPolicy<Scalar> npg_update(const StochasticPolicy<Scalar>& policy, const Table<Scalar>& Q,
                                    const Vector<Scalar>& eta) {
  const Index n = policy.states();
  const Index A = policy.actions();
  if (Q.rows() != n || Q.cols() != A || eta.size() != n) throw DimensionError("npg_update inputs disagree in shape");
  if (!Q.allFinite()) throw NumericalError("npg_update received a non-finite Q estimate");
  Table<Scalar> next = policy.table();
  for (Index q = 0; q < n; ++q) {
    if (!(eta(q) >= 0)) throw Error("step sizes must be nonnegative");
    Scalar low = std::numeric_limits<Scalar>::infinity();
    for (Index a = 0; a < A; ++a)
      if (policy(q, a) > 0) low = std::min(low, Q(q, a));
    bool changed = false;
    Scalar sum = 0;
    for (Index a = 0; a < A; ++a) {
      if (policy(q, a) <= 0) continue;
      const Scalar w = std::exp(-eta(q) * (Q(q, a) - low));
      changed = changed || w != Scalar(1);
      next(q, a) = policy(q, a) * w;
      sum += next(q, a);
    }
    if (!changed) {
      next.row(q) = policy.row(q);
      continue;
    }
    if (!(sum > 0)) throw NumericalError("npg_update produced an all-zero row");
    next.row(q) /= sum;
  }
  return StochasticPolicy<Scalar>(std::move(next));
}

/// FNV-1a over the raw probability table, for cheap policy snapshot identity.
template <typename Scalar>
std::uint64_t policy_hash(const StochasticPolicy<Scalar>& policy) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(policy.table().data());
  const std::size_t len = static_cast<std::size_t>(policy.table().size()) * sizeof(Scalar);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

/// What an evaluator hands back: the estimate driving the update, and the exact J when it has it for free.
template <typename Scalar>
struct Evaluation {
  Table<Scalar> Q;
  std::optional<Scalar> exact_J;
};

template <typename Scalar>
using Evaluator = std::function<Evaluation<Scalar>(const StochasticPolicy<Scalar>& acting, std::size_t iteration)>;

/// Maps the NPG iterate to the policy actually run (e.g. a MaxWeight mixture).
template <typename Scalar>
using Enactment = std::function<StochasticPolicy<Scalar>(const StochasticPolicy<Scalar>&)>;

struct NPGOptions {
  std::size_t iterations = 100;
  std::optional<double> threshold;
  bool stop_at_threshold = false;
};

template <typename Scalar>
struct NPGResult {
  std::vector<Scalar> J;              ///< exact J of the enacted pi_i, i = 0..T-1
  std::vector<std::uint64_t> hashes;  ///< snapshot hash of each pi_i
  StochasticPolicy<Scalar> policy;    ///< last NPG iterate
  std::optional<std::size_t> reached; ///< first i with J_i <= threshold

  std::size_t iterations() const noexcept { return J.size(); }
};

/**
 * Runs NPG from the uniform policy. Iteration i records the exact average cost of the
 * enacted pi_i, asks the evaluator for Q_hat, and applies npg_update with the schedule's
 * per-state step sizes. With T = 0 the result is the uniform policy and an empty curve.
 */
template <typename Scalar>
NPGResult<Scalar> run_npg(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost, const Vector<Scalar>& f,
                          const Evaluator<Scalar>& evaluate, const StepSizeSchedule& schedule, NPGOptions options,
                          const Enactment<Scalar>& enact = {}) {
  schedule.validate();
  detail::check_cost_shape(kernel, cost);
  const Vector<Scalar> eta = step_sizes<Scalar>(schedule, f);
  PoissonSolver<Scalar> solver(kernel, reference_state(cost));
  NPGResult<Scalar> out{{}, {}, StochasticPolicy<Scalar>::uniform(kernel.states(), kernel.actions()), {}};
  out.J.reserve(options.iterations);
  for (std::size_t i = 0; i < options.iterations; ++i) {
    const StochasticPolicy<Scalar> acting = enact ? enact(out.policy) : out.policy;
    auto est = evaluate(acting, i);
    const Scalar J = est.exact_J ? *est.exact_J : solver.solve(acting, cost).J;
    out.J.push_back(J);
    out.hashes.push_back(policy_hash(out.policy));
    if (options.threshold && !out.reached && static_cast<double>(J) <= *options.threshold) {
      out.reached = i;
      if (options.stop_at_threshold) break;
    }
    out.policy = npg_update(out.policy, est.Q, eta);
  }
  return out;
}

/// Exact-evaluation evaluator; reuses the Poisson solve for the reported J.
template <typename Scalar>
Evaluator<Scalar> exact_evaluator(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost) {
  auto solver = std::make_shared<PoissonSolver<Scalar>>(kernel, reference_state(cost));
  return [&kernel, &cost, solver](const StochasticPolicy<Scalar>& pi, std::size_t) {
    const auto sol = solver->solve(pi, cost);
    auto qf = q_from_v(kernel, cost, sol.V, sol.J);
    return Evaluation<Scalar>{std::move(qf.Q), sol.J};
  };
}

// ---------------------------------------------------------------------------
// MaxWeight mixture
// ---------------------------------------------------------------------------

/// Every nonempty queue served at its fastest rate; empty queues take rate index 0.
inline Index maxweight_action(const StateSpace& space, const ActionSpace& actions, const std::vector<double>& rates,
                              Index state) {
  int fastest = 0;
  for (int r = 1; r < static_cast<int>(rates.size()); ++r)
    if (rates[static_cast<std::size_t>(r)] > rates[static_cast<std::size_t>(fastest)]) fastest = r;
  const QueueState q = space.decode(state);
  std::vector<int> choice(static_cast<std::size_t>(actions.queues()), 0);
  for (int j = 0; j < actions.queues(); ++j)
    if (q[j] > 0) choice[static_cast<std::size_t>(j)] = fastest;
  return actions.encode(choice);
}

template <typename Scalar>
Index maxweight_action(const QueueingEnv<Scalar>& env, Index state) {
  return maxweight_action(env.space, env.actions, env.spec.service_rates, state);
}

/// pi(a|q) = w(q) pi_NPG(a|q) + (1 - w(q)) 1[a = maxweight(q)],  w(q) = min(1, 1/(lambda ||q||_1))
template <typename Scalar>
StochasticPolicy<Scalar> mix_with_maxweight(const QueueingEnv<Scalar>& env, const StochasticPolicy<Scalar>& pi,
                                            double lambda_mix) {
  if (!(lambda_mix > 0)) throw Error("MaxWeight mixing parameter must be positive");
  Table<Scalar> out = pi.table();
  for (Index q = 0; q < pi.states(); ++q) {
    const double norm = env.space.total_jobs(q);
    if (norm * lambda_mix <= 1.0) continue;
    const Scalar w = static_cast<Scalar>(1.0 / (lambda_mix * norm));
    out.row(q) *= w;
    out(q, maxweight_action(env, q)) += Scalar(1) - w;
  }
  return StochasticPolicy<Scalar>(std::move(out));
}

}  // namespace npgq
