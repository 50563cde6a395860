#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "npgq/error.hpp"
#include "npgq/state_space.hpp"

namespace npgq {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// States x actions table, one row per state.
template <typename Scalar>
using Table = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using SparseRows = Eigen::SparseMatrix<Scalar, Eigen::RowMajor>;

/// Solves with more states than this go through SparseLU instead of dense LU.
inline constexpr Index kDenseStateLimit = 256;

/// Requested tolerance, floored at a few ulps of the scalar type.
template <typename Scalar>
constexpr Scalar tolerance(double requested) {
  return std::max(static_cast<Scalar>(requested), Scalar(64) * std::numeric_limits<Scalar>::epsilon());
}

// ---------------------------------------------------------------------------
// Kernel, cost, policy
// ---------------------------------------------------------------------------

/// Transition kernel P(q'|q,a) stored as one sparse row-stochastic matrix per action.
template <typename Scalar>
class MarkovKernel {
 public:
  explicit MarkovKernel(std::vector<SparseRows<Scalar>> per_action) : rows_(std::move(per_action)) {
    if (rows_.empty()) throw DimensionError("kernel needs at least one action");
    const Index n = rows_.front().rows();
    const Scalar tol = tolerance<Scalar>(1e-12);
    for (auto& m : rows_) {
      if (m.rows() != n || m.cols() != n) throw DimensionError("kernel action matrices must be n x n");
      m.makeCompressed();
      for (Index q = 0; q < n; ++q) {
        Scalar sum = 0;
        for (typename SparseRows<Scalar>::InnerIterator it(m, q); it; ++it) {
          if (!(it.value() >= 0)) throw Error("kernel has a negative transition probability");
          sum += it.value();
        }
        if (std::abs(sum - Scalar(1)) > tol) throw Error("kernel row does not sum to one");
      }
    }
  }

  Index states() const noexcept { return rows_.front().rows(); }
  Index actions() const noexcept { return static_cast<Index>(rows_.size()); }
  const SparseRows<Scalar>& action(Index a) const { return rows_.at(static_cast<std::size_t>(a)); }

  Scalar probability(Index q, Index a, Index next) const { return action(a).coeff(q, next); }

  /// Calls fn(next, p) for every successor with positive probability.
  template <typename Fn>
  void for_each_successor(Index q, Index a, Fn&& fn) const {
    for (typename SparseRows<Scalar>::InnerIterator it(action(a), q); it; ++it)
      if (it.value() > 0) fn(it.col(), it.value());
  }

 private:
  std::vector<SparseRows<Scalar>> rows_;
};

template <typename Scalar>
class KernelBuilder {
 public:
  KernelBuilder(Index states, Index actions)
      : states_(states), triplets_(static_cast<std::size_t>(actions)) {}

  void add(Index q, Index a, Index next, Scalar p) {
    if (p == Scalar(0)) return;
    triplets_.at(static_cast<std::size_t>(a)).emplace_back(q, next, p);
  }

  MarkovKernel<Scalar> build() const {
    std::vector<SparseRows<Scalar>> rows;
    for (const auto& t : triplets_) {
      SparseRows<Scalar> m(states_, states_);
      m.setFromTriplets(t.begin(), t.end());
      rows.push_back(std::move(m));
    }
    return MarkovKernel<Scalar>(std::move(rows));
  }

 private:
  Index states_;
  std::vector<std::vector<Eigen::Triplet<Scalar>>> triplets_;
};

/// Nonnegative per-step cost c(q, a).
template <typename Scalar>
class CostModel {
 public:
  explicit CostModel(Table<Scalar> c) : c_(std::move(c)) {
    if ((c_.array() < Scalar(0)).any() || c_.hasNaN()) throw Error("costs must be nonnegative");
  }

  Index states() const noexcept { return c_.rows(); }
  Index actions() const noexcept { return c_.cols(); }
  const Table<Scalar>& table() const noexcept { return c_; }
  Scalar operator()(Index q, Index a) const { return c_(q, a); }

  /// max_a c(q, a)
  Vector<Scalar> max_cost() const { return c_.rowwise().maxCoeff(); }
  /// min_a c(q, a)
  Vector<Scalar> min_cost() const { return c_.rowwise().minCoeff(); }

 private:
  Table<Scalar> c_;
};

/// Tabular randomized policy pi(a|q).
template <typename Scalar>
class StochasticPolicy {
 public:
  explicit StochasticPolicy(Table<Scalar> probs) : probs_(std::move(probs)) {
    const Scalar tol = tolerance<Scalar>(1e-12);
    if (probs_.hasNaN() || (probs_.array() < Scalar(0)).any())
      throw Error("policy probabilities must be nonnegative");
    for (Index q = 0; q < probs_.rows(); ++q)
      if (std::abs(probs_.row(q).sum() - Scalar(1)) > tol) throw Error("policy row does not sum to one");
  }

  static StochasticPolicy uniform(Index states, Index actions) {
    return StochasticPolicy(Table<Scalar>::Constant(states, actions, Scalar(1) / Scalar(actions)));
  }

  static StochasticPolicy deterministic(std::span<const Index> choice, Index actions) {
    Table<Scalar> p = Table<Scalar>::Zero(static_cast<Index>(choice.size()), actions);
    for (std::size_t q = 0; q < choice.size(); ++q) p(static_cast<Index>(q), choice[q]) = Scalar(1);
    return StochasticPolicy(std::move(p));
  }

  Index states() const noexcept { return probs_.rows(); }
  Index actions() const noexcept { return probs_.cols(); }
  const Table<Scalar>& table() const noexcept { return probs_; }
  Scalar operator()(Index q, Index a) const { return probs_(q, a); }
  auto row(Index q) const { return probs_.row(q); }

 private:
  Table<Scalar> probs_;
};

/// Relative state-action values together with the average cost they are relative to.
template <typename Scalar>
struct QFunction {
  Scalar J = 0;
  Table<Scalar> Q;

  /// V(q) = sum_a pi(a|q) Q(q, a)
  Vector<Scalar> values(const StochasticPolicy<Scalar>& policy) const {
    return (policy.table().array() * Q.array()).rowwise().sum().matrix();
  }
};

template <typename Scalar>
struct PoissonSolution {
  Scalar J = 0;
  Vector<Scalar> V;
  Index reference = 0;
  Scalar residual = 0;
};

namespace detail {

template <typename Scalar>
void check_policy_shape(const MarkovKernel<Scalar>& kernel, const StochasticPolicy<Scalar>& policy) {
  if (policy.states() != kernel.states() || policy.actions() != kernel.actions())
    throw DimensionError("policy shape does not match kernel");
}

template <typename Scalar>
void check_cost_shape(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost) {
  if (cost.states() != kernel.states() || cost.actions() != kernel.actions())
    throw DimensionError("cost shape does not match kernel");
}

/// sup_q |J + V(q) - c(q) - (P V)(q)|
template <typename Scalar>
Scalar poisson_residual(const SparseRows<Scalar>& P, const Vector<Scalar>& c, Scalar J, const Vector<Scalar>& V) {
  return ((V.array() + J) - c.array() - (P * V).array()).abs().maxCoeff();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Policy-induced chain
// ---------------------------------------------------------------------------

/// P_pi(q'|q) = sum_a pi(a|q) P(q'|q,a). Keeps the union sparsity pattern across actions,
/// so entries whose action has zero probability stay stored as explicit zeros.
template <typename Scalar>
SparseRows<Scalar> induced_kernel(const MarkovKernel<Scalar>& kernel, const StochasticPolicy<Scalar>& policy) {
  detail::check_policy_shape(kernel, policy);
  std::vector<Eigen::Triplet<Scalar>> t;
  for (Index a = 0; a < kernel.actions(); ++a) {
    const auto& m = kernel.action(a);
    for (Index q = 0; q < m.outerSize(); ++q)
      for (typename SparseRows<Scalar>::InnerIterator it(m, q); it; ++it)
        t.emplace_back(q, it.col(), policy(q, a) * it.value());
  }
  SparseRows<Scalar> P(kernel.states(), kernel.states());
  P.setFromTriplets(t.begin(), t.end());
  return P;
}

/// c_pi(q) = sum_a pi(a|q) c(q, a)
template <typename Scalar>
Vector<Scalar> policy_cost(const CostModel<Scalar>& cost, const StochasticPolicy<Scalar>& policy) {
  if (cost.states() != policy.states() || cost.actions() != policy.actions())
    throw DimensionError("policy shape does not match cost");
  return (cost.table().array() * policy.table().array()).rowwise().sum().matrix();
}

/// Lowest-index state minimizing min_a c(q, a); the anchor where V = 0.
template <typename Scalar>
Index reference_state(const CostModel<Scalar>& cost) {
  Index best = 0;
  cost.min_cost().minCoeff(&best);
  return best;
}

// ---------------------------------------------------------------------------
// Stationary distribution
// ---------------------------------------------------------------------------

struct PowerIterationOptions {
  double tolerance = 1e-12;
  std::size_t max_iterations = 5'000'000;
};

/**
 * Power iteration on the lazy chain (I + P)/2, which has the same stationary
 * distribution as P but is aperiodic. Stops when ||d P - d||_inf <= tolerance.
 * Throws ConvergenceError carrying the final residual at the iteration cap.
 */
template <typename Scalar>
Vector<Scalar> stationary_distribution(const SparseRows<Scalar>& P, PowerIterationOptions options = {}) {
  const Index n = P.rows();
  if (P.cols() != n || n == 0) throw DimensionError("stationary distribution needs a square kernel");
  const Scalar tol = tolerance<Scalar>(options.tolerance);
  Vector<Scalar> d = Vector<Scalar>::Constant(n, Scalar(1) / Scalar(n));
  Scalar residual = std::numeric_limits<Scalar>::infinity();
  for (std::size_t it = 0; it < options.max_iterations; ++it) {
    Vector<Scalar> dP = (d.transpose() * P).transpose();
    residual = (dP - d).cwiseAbs().maxCoeff();
    if (residual <= tol) return d / d.sum();
    d = Scalar(0.5) * (d + dP);
    d /= d.sum();
  }
  throw ConvergenceError("stationary distribution did not converge", static_cast<double>(residual),
                         options.max_iterations);
}

/// Direct solve of (I - P^T + 1 1^T) x = 1. Dense below kDenseStateLimit; above it
/// one balance equation is replaced by the normalization sum(x) = 1.
template <typename Scalar>
Vector<Scalar> stationary_distribution_direct(const SparseRows<Scalar>& P) {
  const Index n = P.rows();
  if (P.cols() != n || n == 0) throw DimensionError("stationary distribution needs a square kernel");
  using Dense = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  Vector<Scalar> x;
  if (n <= kDenseStateLimit) {
    Dense A = Dense::Identity(n, n) - Dense(P).transpose() + Dense::Ones(n, n);
    x = A.partialPivLu().solve(Vector<Scalar>::Ones(n));
  } else {
    std::vector<Eigen::Triplet<Scalar>> t;
    for (Index q = 0; q < n; ++q)
      for (typename SparseRows<Scalar>::InnerIterator it(P, q); it; ++it)
        if (it.col() != n - 1) t.emplace_back(it.col(), q, -it.value());
    for (Index q = 0; q < n - 1; ++q) t.emplace_back(q, q, Scalar(1));
    for (Index q = 0; q < n; ++q) t.emplace_back(n - 1, q, Scalar(1));
    Eigen::SparseMatrix<Scalar> A(n, n);
    A.setFromTriplets(t.begin(), t.end());
    Eigen::SparseLU<Eigen::SparseMatrix<Scalar>> lu;
    lu.compute(A);
    if (lu.info() != Eigen::Success) throw Error("stationary system is singular");
    Vector<Scalar> rhs = Vector<Scalar>::Zero(n);
    rhs(n - 1) = 1;
    x = lu.solve(rhs);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Poisson's equation
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
using SparseLUSolver = Eigen::SparseLU<Eigen::SparseMatrix<Scalar>, Eigen::COLAMDOrdering<int>>;

/// Cached symbolic analysis for the sparse path; pattern_nnz < 0 means not analyzed yet.
template <typename Scalar>
struct SparseFactorCache {
  SparseLUSolver<Scalar> lu;
  Index pattern_nnz = -1;
};

template <typename Scalar>
PoissonSolution<Scalar> solve_poisson_system(const SparseRows<Scalar>& P, const Vector<Scalar>& c, Index reference,
                                             double residual_tolerance, SparseFactorCache<Scalar>& cache) {
  const Index n = P.rows();
  if (P.cols() != n || c.size() != n) throw DimensionError("Poisson system shape mismatch");
  if (reference < 0 || reference >= n) throw DimensionError("reference state out of range");
  Vector<Scalar> rhs(n + 1);
  rhs.head(n) = c;
  rhs(n) = 0;
  Vector<Scalar> x;
  if (n <= kDenseStateLimit) {
    using Dense = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    Dense A = Dense::Zero(n + 1, n + 1);
    A.topLeftCorner(n, n) = Dense::Identity(n, n) - Dense(P);
    A.col(n).head(n).setOnes();
    A(n, reference) = 1;
    x = A.partialPivLu().solve(rhs);
  } else {
    std::vector<Eigen::Triplet<Scalar>> t;
    t.reserve(static_cast<std::size_t>(P.nonZeros() + 2 * n + 1));
    for (Index q = 0; q < n; ++q) {
      t.emplace_back(q, q, Scalar(1));
      for (typename SparseRows<Scalar>::InnerIterator it(P, q); it; ++it) t.emplace_back(q, it.col(), -it.value());
      t.emplace_back(q, n, Scalar(1));
    }
    t.emplace_back(n, reference, Scalar(1));
    Eigen::SparseMatrix<Scalar> A(n + 1, n + 1);
    A.setFromTriplets(t.begin(), t.end());
    A.makeCompressed();
    if (cache.pattern_nnz != A.nonZeros()) {
      cache.lu.analyzePattern(A);
      cache.pattern_nnz = A.nonZeros();
    }
    cache.lu.factorize(A);
    if (cache.lu.info() != Eigen::Success) throw Error("Poisson system is singular");
    x = cache.lu.solve(rhs);
  }
  PoissonSolution<Scalar> out;
  out.V = x.head(n);
  out.J = x(n);
  out.reference = reference;
  out.residual = poisson_residual(P, c, out.J, out.V);
  if (!std::isfinite(static_cast<double>(out.residual)) || out.residual > tolerance<Scalar>(residual_tolerance))
    throw ConvergenceError("Poisson solve exceeded residual tolerance", static_cast<double>(out.residual), 1);
  return out;
}

}  // namespace detail

/// One-off solve of J + V = c + P V with V(reference) = 0, as a single (n+1)-unknown
/// linear system in [V; J]. Dense LU up to kDenseStateLimit states, SparseLU above.
template <typename Scalar>
PoissonSolution<Scalar> solve_poisson(const SparseRows<Scalar>& P, const Vector<Scalar>& c, Index reference,
                                      double residual_tolerance = 1e-8) {
  detail::SparseFactorCache<Scalar> cache;
  return detail::solve_poisson_system(P, c, reference, residual_tolerance, cache);
}

/// Repeated Poisson solves on one kernel. The induced chain's sparsity pattern is
/// fixed by the kernel, so the sparse path reuses its symbolic analysis. Not thread-safe.
template <typename Scalar>
class PoissonSolver {
 public:
  PoissonSolver(const MarkovKernel<Scalar>& kernel, Index reference, double residual_tolerance = 1e-8)
      : kernel_(&kernel), reference_(reference), tolerance_(residual_tolerance) {
    if (reference < 0 || reference >= kernel.states()) throw DimensionError("reference state out of range");
  }

  PoissonSolution<Scalar> solve(const StochasticPolicy<Scalar>& policy, const CostModel<Scalar>& cost) {
    detail::check_cost_shape(*kernel_, cost);
    return solve(induced_kernel(*kernel_, policy), policy_cost(cost, policy));
  }

  PoissonSolution<Scalar> solve(const SparseRows<Scalar>& P, const Vector<Scalar>& c) {
    return detail::solve_poisson_system(P, c, reference_, tolerance_, cache_);
  }

  Index reference() const noexcept { return reference_; }

 private:
  const MarkovKernel<Scalar>* kernel_;
  Index reference_;
  double tolerance_;
  detail::SparseFactorCache<Scalar> cache_;
};

/// Q(q,a) = c(q,a) - J + sum_q' P(q'|q,a) V(q')
template <typename Scalar>
QFunction<Scalar> q_from_v(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost, const Vector<Scalar>& V,
                           Scalar J) {
  detail::check_cost_shape(kernel, cost);
  if (V.size() != kernel.states()) throw DimensionError("value vector length does not match kernel");
  QFunction<Scalar> out;
  out.J = J;
  out.Q.resize(kernel.states(), kernel.actions());
  for (Index a = 0; a < kernel.actions(); ++a)
    out.Q.col(a) = cost.table().col(a) - Vector<Scalar>::Constant(kernel.states(), J) + kernel.action(a) * V;
  return out;
}

/// Exact Q_pi via Poisson's equation anchored at the cost model's reference state.
template <typename Scalar>
QFunction<Scalar> evaluate_policy(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost,
                                  const StochasticPolicy<Scalar>& policy, std::optional<Index> reference = {}) {
  PoissonSolver<Scalar> solver(kernel, reference.value_or(reference_state(cost)));
  const auto sol = solver.solve(policy, cost);
  return q_from_v(kernel, cost, sol.V, sol.J);
}

// ---------------------------------------------------------------------------
// Ground-truth optimum
// ---------------------------------------------------------------------------

struct RelativeValueIterationOptions {
  double span_tolerance = 1e-9;
  std::size_t max_iterations = 1'000'000;
};

template <typename Scalar>
struct OptimalSolution {
  Scalar J = 0;            ///< midpoint of the final bracket
  Scalar lower_bound = 0;  ///< min_q (T h - h)(q) <= J*
  Scalar upper_bound = 0;  ///< max_q (T h - h)(q) >= J*
  std::vector<Index> actions;
  Vector<Scalar> V;
  std::size_t iterations = 0;
  Scalar span = 0;

  StochasticPolicy<Scalar> policy(Index n_actions) const {
    return StochasticPolicy<Scalar>::deterministic(actions, n_actions);
  }
};

/**
 * Relative value iteration for the average-cost optimality equation
 * J + h(q) = min_a [c(q,a) + sum_q' P(q'|q,a) h(q')], renormalized at the
 * reference state each sweep. Stops once the span seminorm of T h - h is below
 * the tolerance; greedy ties resolve to the lowest action index.
 */
template <typename Scalar>
OptimalSolution<Scalar> relative_value_iteration(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost,
                                                 RelativeValueIterationOptions options = {}) {
  detail::check_cost_shape(kernel, cost);
  const Index n = kernel.states();
  const Index A = kernel.actions();
  const Index ref = reference_state(cost);
  Vector<Scalar> h = Vector<Scalar>::Zero(n);
  Vector<Scalar> Th(n);
  Table<Scalar> q_values(n, A);
  Scalar span = std::numeric_limits<Scalar>::infinity();
  for (std::size_t it = 1; it <= options.max_iterations; ++it) {
    for (Index a = 0; a < A; ++a) q_values.col(a) = cost.table().col(a) + kernel.action(a) * h;
    Th = q_values.rowwise().minCoeff();
    const Vector<Scalar> diff = Th - h;
    const Scalar hi = diff.maxCoeff();
    const Scalar lo = diff.minCoeff();
    span = hi - lo;
    if (span <= tolerance<Scalar>(options.span_tolerance)) {
      OptimalSolution<Scalar> out;
      out.J = Scalar(0.5) * (hi + lo);
      out.lower_bound = lo;
      out.upper_bound = hi;
      out.actions.resize(static_cast<std::size_t>(n));
      for (Index q = 0; q < n; ++q) {
        Index best = 0;
        for (Index a = 1; a < A; ++a)
          if (q_values(q, a) < q_values(q, best)) best = a;
        out.actions[static_cast<std::size_t>(q)] = best;
      }
      out.V = Th - Vector<Scalar>::Constant(n, Th(ref));
      out.iterations = it;
      out.span = span;
      return out;
    }
    h = Th - Vector<Scalar>::Constant(n, Th(ref));
  }
  throw ConvergenceError("relative value iteration hit its iteration cap", static_cast<double>(span),
                         options.max_iterations);
}

// ---------------------------------------------------------------------------
// Performance difference
// ---------------------------------------------------------------------------

/**
 * |(J_pi - J_pi') - sum_q d_pi(q) [Q_pi'(q, pi(q)) - V_pi'(q)]|, where
 * Q_pi'(q, pi(q)) averages Q_pi' under pi and V_pi' averages it under pi'.
 * Zero up to rounding whenever every input is exact.
 */
template <typename Scalar>
Scalar performance_difference(Scalar J_pi, const QFunction<Scalar>& q_prime, const Vector<Scalar>& d_pi,
                              const StochasticPolicy<Scalar>& pi, const StochasticPolicy<Scalar>& pi_prime) {
  if (q_prime.Q.rows() != d_pi.size() || pi.states() != d_pi.size() || pi_prime.states() != d_pi.size())
    throw DimensionError("performance difference inputs disagree on state count");
  const Vector<Scalar> under_pi = q_prime.values(pi);
  const Vector<Scalar> under_prime = q_prime.values(pi_prime);
  const Scalar rhs = d_pi.dot(under_pi - under_prime);
  return std::abs((J_pi - q_prime.J) - rhs);
}

/// Strong connectivity of the support graph of P (forward and backward reachability from state 0).
template <typename Scalar>
bool is_irreducible(const SparseRows<Scalar>& P) {
  const Index n = P.rows();
  if (n == 0) return false;
  auto reach_all = [n](const SparseRows<Scalar>& M) {
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    std::vector<Index> stack{0};
    seen[0] = 1;
    Index count = 1;
    while (!stack.empty()) {
      const Index q = stack.back();
      stack.pop_back();
      for (typename SparseRows<Scalar>::InnerIterator it(M, q); it; ++it) {
        if (it.value() <= 0 || seen[static_cast<std::size_t>(it.col())]) continue;
        seen[static_cast<std::size_t>(it.col())] = 1;
        ++count;
        stack.push_back(it.col());
      }
    }
    return count == n;
  };
  SparseRows<Scalar> Pt = P.transpose();
  return reach_all(P) && reach_all(Pt);
}

}  // namespace npgq
