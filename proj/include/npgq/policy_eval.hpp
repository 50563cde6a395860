#pragma once

#include <cmath>
#include <string>

#include "npgq/mdp.hpp"
#include "npgq/queueing.hpp"

namespace npgq {

enum class LearningRateDecay { Constant, InvSqrt };

struct TDConfig {
  double beta = 0.1;
  double lambda = 0.95;
  std::size_t n = 3000;
  double init = 0.0;
  LearningRateDecay decay = LearningRateDecay::Constant;

  void validate() const {
    if (!(beta > 0)) throw Error("TD learning rate beta must be positive");
    if (!(lambda >= 0 && lambda <= 1)) throw Error("TD trace decay lambda must lie in [0, 1]");
    if (n < 1) throw Error("TD trajectory length n must be at least 1");
    if (!std::isfinite(init)) throw Error("TD initial value must be finite");
  }
};

/// Noiseless evaluation: Poisson's equation anchored at the reference state, then Q from V.
template <typename Scalar>
QFunction<Scalar> exact_evaluate(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost,
                                 const StochasticPolicy<Scalar>& policy, std::optional<Index> reference = {}) {
  return evaluate_policy(kernel, cost, policy, reference);
}

/// (1/n) sum_t c_t
template <typename Scalar>
Scalar estimate_average_cost(const Trajectory<Scalar>& traj) {
  if (traj.steps.empty()) throw Error("cannot estimate the average cost of an empty trajectory");
  Scalar sum = 0;
  for (const auto& s : traj.steps) sum += s.cost;
  return sum / static_cast<Scalar>(traj.steps.size());
}

/**
 * One pass of average-cost TD(lambda) with accumulating traces over the
 * state-action pairs of `traj`:
 *   delta_t = c_t - J + Q(q_{t+1}, a_{t+1}) - Q(q_t, a_t)
 *   e <- lambda e;  e(q_t, a_t) += 1;  Q <- Q + beta_t delta_t e
 * The result is shifted so that sum_a pi(a|q*) Q(q*, a) = 0 at the reference state.
 */
template <typename Scalar>
QFunction<Scalar> td_lambda_evaluate(const Trajectory<Scalar>& traj, Scalar J_hat, const TDConfig& config,
                                     const StochasticPolicy<Scalar>& policy, Index reference) {
  config.validate();
  if (traj.steps.empty()) throw Error("TD(lambda) needs a nonempty trajectory");
  const Index n = policy.states();
  const Index A = policy.actions();
  if (reference < 0 || reference >= n) throw DimensionError("reference state out of range");
  Table<Scalar> Q = Table<Scalar>::Constant(n, A, static_cast<Scalar>(config.init));
  Table<Scalar> e = Table<Scalar>::Zero(n, A);
  const Scalar lambda = static_cast<Scalar>(config.lambda);
  const auto& steps = traj.steps;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto& s = steps[t];
    if (s.state >= n || s.next_state >= n || s.action >= A) throw DimensionError("trajectory leaves the policy's range");
    const Index next_action = t + 1 < steps.size() ? steps[t + 1].action : traj.final_action;
    const Scalar delta = s.cost - J_hat + Q(s.next_state, next_action) - Q(s.state, s.action);
    e *= lambda;
    e(s.state, s.action) += Scalar(1);
    const double beta = config.decay == LearningRateDecay::InvSqrt ? config.beta / std::sqrt(static_cast<double>(t + 1))
                                                                    : config.beta;
    Q.noalias() += (static_cast<Scalar>(beta) * delta) * e;
  }
  if (!Q.allFinite())
    throw NumericalError("TD(lambda) diverged (non-finite Q); try a smaller learning rate beta");
  const Scalar shift = policy.row(reference).dot(Q.row(reference));
  Q.array() -= shift;
  return QFunction<Scalar>{J_hat, std::move(Q)};
}

template <typename Scalar>
struct ErrorProfile {
  Vector<Scalar> delta;       ///< max_a |Q_hat(q,a) - Q(q,a)|
  Scalar weighted = 0;        ///< sum_q d(q) delta(q)
  Scalar max_delta = 0;
  Scalar max_over_f2 = 0;     ///< max_q delta(q) / max(f(q)^2, 1)
};

template <typename Scalar>
ErrorProfile<Scalar> evaluation_error_profile(const Table<Scalar>& Q_hat, const Table<Scalar>& Q_exact,
                                              const Vector<Scalar>& d, const Vector<Scalar>& f) {
  if (Q_hat.rows() != Q_exact.rows() || Q_hat.cols() != Q_exact.cols() || d.size() != Q_hat.rows() ||
      f.size() != Q_hat.rows())
    throw DimensionError("error profile inputs disagree in shape");
  ErrorProfile<Scalar> out;
  out.delta = (Q_hat - Q_exact).cwiseAbs().rowwise().maxCoeff();
  out.weighted = d.dot(out.delta);
  out.max_delta = out.delta.maxCoeff();
  for (Index q = 0; q < f.size(); ++q)
    out.max_over_f2 = std::max(out.max_over_f2, out.delta(q) / std::max(f(q) * f(q), Scalar(1)));
  return out;
}

}  // namespace npgq
