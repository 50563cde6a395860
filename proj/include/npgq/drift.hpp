#pragma once

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "npgq/mdp.hpp"
#include "npgq/random_policy.hpp"
#include "npgq/state_space.hpp"

namespace npgq {

/// f(q) = ||q||_1
inline int lyapunov_f(const QueueState& q) { return q.sum(); }

template <typename Scalar>
Vector<Scalar> lyapunov_values(const StateSpace& space) {
  Vector<Scalar> f(space.size());
  for (Index i = 0; i < space.size(); ++i) f(i) = static_cast<Scalar>(lyapunov_f(space.decode(i)));
  return f;
}

// ---------------------------------------------------------------------------
// Drift
// ---------------------------------------------------------------------------

/// Delta_a(q) = E[f^2(q') - f^2(q) | q, a], one column per action.
template <typename Scalar>
Table<Scalar> action_drift(const MarkovKernel<Scalar>& kernel, const Vector<Scalar>& f) {
  if (f.size() != kernel.states()) throw DimensionError("Lyapunov vector length does not match kernel");
  const Vector<Scalar> f2 = f.array().square().matrix();
  Table<Scalar> out(kernel.states(), kernel.actions());
  for (Index a = 0; a < kernel.actions(); ++a) out.col(a) = kernel.action(a) * f2 - f2;
  return out;
}

/// Delta_pi(q) = sum_a pi(a|q) Delta_a(q)
template <typename Scalar>
Vector<Scalar> drift_per_state(const MarkovKernel<Scalar>& kernel, const StochasticPolicy<Scalar>& policy,
                               const Vector<Scalar>& f) {
  detail::check_policy_shape(kernel, policy);
  return (policy.table().array() * action_drift(kernel, f).array()).rowwise().sum().matrix();
}

/// Deterministic argmax_a Delta_a(q). Since drift is linear in pi(.|q), this policy's
/// drift dominates every randomized policy state by state.
template <typename Scalar>
StochasticPolicy<Scalar> drift_maximizing_policy(const MarkovKernel<Scalar>& kernel, const Vector<Scalar>& f) {
  const Table<Scalar> d = action_drift(kernel, f);
  std::vector<Index> choice(static_cast<std::size_t>(kernel.states()));
  for (Index q = 0; q < kernel.states(); ++q) d.row(q).maxCoeff(&choice[static_cast<std::size_t>(q)]);
  return StochasticPolicy<Scalar>::deterministic(choice, kernel.actions());
}

/**
 * The generating family used for "for all policies" quantifiers: every
 * constant-action policy, the optimal policy when supplied, `random` seeded
 * deterministic policies, and the drift-maximizing policy (which makes the
 * fitted drift constants valid for the full randomized class).
 */
template <typename Scalar>
std::vector<StochasticPolicy<Scalar>> certificate_family(const MarkovKernel<Scalar>& kernel, const Vector<Scalar>& f,
                                                         const std::optional<StochasticPolicy<Scalar>>& optimal,
                                                         int random, std::uint64_t seed) {
  std::vector<StochasticPolicy<Scalar>> family;
  for (Index a = 0; a < kernel.actions(); ++a)
    family.push_back(constant_action_policy<Scalar>(kernel.states(), kernel.actions(), a));
  if (optimal) family.push_back(*optimal);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < random; ++i)
    family.push_back(random_deterministic_policy<Scalar>(kernel.states(), kernel.actions(), rng));
  family.push_back(drift_maximizing_policy(kernel, f));
  return family;
}

struct DriftFitOptions {
  double epsilon_min = 1e-4;
  double epsilon_max = 10.0;
  int grid_points = 64;
};

template <typename Scalar>
struct DriftFit {
  Scalar epsilon = 0;
  Scalar g = 0;
  std::vector<Index> core;  ///< {q : min_a c(q,a) <= 2g/epsilon}
};

/**
 * Fits Delta_pi(q) <= -epsilon * cmax(q) + g over the family. For each epsilon on a
 * log-spaced grid, g is the smallest feasible offset, max over (pi, q) of
 * Delta_pi(q) + epsilon * cmax(q). Among grid points with a nonempty core and
 * f > 0 off the core, the one maximizing epsilon / (g + 1) wins.
 */
template <typename Scalar>
DriftFit<Scalar> fit_drift_constants(const MarkovKernel<Scalar>& kernel,
                                     std::span<const StochasticPolicy<Scalar>> family, const Vector<Scalar>& f,
                                     const Vector<Scalar>& c_max, const Vector<Scalar>& c_min,
                                     DriftFitOptions options = {}) {
  const Index n = kernel.states();
  if (family.empty()) throw CertificateError("drift fit needs a nonempty policy family");
  if (c_max.size() != n || c_min.size() != n) throw DimensionError("cost bounds do not match kernel");
  Vector<Scalar> worst = Vector<Scalar>::Constant(n, -std::numeric_limits<Scalar>::infinity());
  for (const auto& pi : family) worst = worst.cwiseMax(drift_per_state(kernel, pi, f));

  std::optional<DriftFit<Scalar>> best;
  Scalar best_score = -1;
  std::vector<long> bad_states;
  const double log_lo = std::log(options.epsilon_min);
  const double log_hi = std::log(options.epsilon_max);
  for (int k = 0; k < options.grid_points; ++k) {
    const double t = options.grid_points == 1 ? 0.0 : static_cast<double>(k) / (options.grid_points - 1);
    const Scalar eps = static_cast<Scalar>(std::exp(log_lo + t * (log_hi - log_lo)));
    const Scalar g = (worst + eps * c_max).maxCoeff();
    DriftFit<Scalar> fit{eps, g, {}};
    bool ok = g > 0;
    std::vector<long> bad;
    for (Index q = 0; q < n; ++q) {
      if (c_min(q) <= Scalar(2) * g / eps) {
        fit.core.push_back(q);
      } else if (!(f(q) > 0)) {
        bad.push_back(static_cast<long>(q));
      }
    }
    ok = ok && !fit.core.empty() && bad.empty();
    if (!ok) {
      if (bad_states.empty()) bad_states = bad;
      continue;
    }
    const Scalar score = eps / (g + Scalar(1));
    if (score > best_score) {
      best_score = score;
      best = std::move(fit);
    }
  }
  if (!best) throw CertificateError("no epsilon on the grid yields a valid drift certificate", bad_states);
  return *best;
}

/// D = max |f(q') - f(q)| over every positive-probability transition.
template <typename Scalar>
Scalar compute_D(const MarkovKernel<Scalar>& kernel, const Vector<Scalar>& f) {
  Scalar D = 0;
  for (Index a = 0; a < kernel.actions(); ++a)
    for (Index q = 0; q < kernel.states(); ++q)
      kernel.for_each_successor(q, a, [&](Index next, Scalar) { D = std::max(D, std::abs(f(next) - f(q))); });
  return D;
}

// ---------------------------------------------------------------------------
// Reachability of the core
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Reachability {
  Index T_B = 0;
  Scalar p_B = 0;
};

namespace detail {

/// Steps every chain forward from the core rows until all core-to-core T-step
/// probabilities are positive across every chain.
template <typename Scalar>
Reachability<Scalar> first_uniform_positive_power(const std::vector<SparseRows<Scalar>>& chains,
                                                  const std::vector<Index>& core, Index max_steps) {
  if (core.empty()) throw CertificateError("reachability needs a nonempty core");
  const Index n = chains.front().rows();
  const Index m = static_cast<Index>(core.size());
  std::vector<Table<Scalar>> rows(chains.size(), Table<Scalar>::Zero(m, n));
  for (auto& r : rows)
    for (Index i = 0; i < m; ++i) r(i, core[static_cast<std::size_t>(i)]) = 1;
  for (Index T = 1; T <= max_steps; ++T) {
    Scalar low = std::numeric_limits<Scalar>::infinity();
    for (std::size_t k = 0; k < chains.size(); ++k) {
      rows[k] = rows[k] * chains[k];
      for (Index i = 0; i < m; ++i)
        for (Index j : core) low = std::min(low, rows[k](i, j));
    }
    if (low > 0) return {T, low};
  }
  throw CertificateError("core not uniformly reachable within the step cap");
}

}  // namespace detail

/// Smallest T with min over the family and core pairs of P_pi^T(q'|q) > 0, and that minimum.
/// Sample-based: it certifies only the policies in the family.
template <typename Scalar>
Reachability<Scalar> estimate_TB_pB(const MarkovKernel<Scalar>& kernel, std::span<const StochasticPolicy<Scalar>> family,
                                    const std::vector<Index>& core, std::optional<Index> max_steps = {}) {
  std::vector<SparseRows<Scalar>> chains;
  for (const auto& pi : family) chains.push_back(induced_kernel(kernel, pi));
  const Index n = kernel.states();
  return detail::first_uniform_positive_power(chains, core, max_steps.value_or(n * n));
}

/// Policy-free variant: powers of the entrywise minimum over actions, a substochastic
/// matrix bounded above by every P_pi. Its (T, p) pair holds for all randomized policies.
template <typename Scalar>
Reachability<Scalar> uniform_TB_pB(const MarkovKernel<Scalar>& kernel, const std::vector<Index>& core,
                                   std::optional<Index> max_steps = {}) {
  SparseRows<Scalar> low = kernel.action(0);
  for (Index a = 1; a < kernel.actions(); ++a) {
    // Entries absent from one action's row are zero there, so the minimum keeps the intersection.
    std::vector<Eigen::Triplet<Scalar>> t;
    const auto& m = kernel.action(a);
    for (Index q = 0; q < low.outerSize(); ++q)
      for (typename SparseRows<Scalar>::InnerIterator it(low, q); it; ++it) {
        const Scalar other = m.coeff(q, it.col());
        if (other > 0) t.emplace_back(q, it.col(), std::min(it.value(), other));
      }
    SparseRows<Scalar> next(low.rows(), low.cols());
    next.setFromTriplets(t.begin(), t.end());
    low = std::move(next);
  }
  const Index n = kernel.states();
  return detail::first_uniform_positive_power<Scalar>({low}, core, max_steps.value_or(n * n));
}

// ---------------------------------------------------------------------------
// Certificate
// ---------------------------------------------------------------------------

/// Which linear term enters M_q: (4D/eps) f(q) as the appendix proves, or the constant 4D/eps.
enum class StepBoundForm { Appendix, Theorem };

template <typename Scalar>
struct DriftCertificate {
  Vector<Scalar> f;
  Scalar epsilon = 0;
  Scalar g = 0;
  Scalar D = 0;
  std::vector<Index> core;
  Index reference = 0;
  Scalar K = 0;    ///< max over core successors of (2/eps) f^2(q')
  Scalar C_B = 0;  ///< max over the core of cmax
  Index T_B = 0;
  Scalar p_B = 0;
  Scalar g1 = 0;
  Vector<Scalar> M;

  Scalar average_cost_bound() const { return g / epsilon; }
  Scalar occupancy_bound() const { return static_cast<Scalar>(T_B) / (p_B * p_B); }
  Scalar value_lower_bound() const { return -average_cost_bound() * occupancy_bound(); }

  /// (2/eps) f^2 + (4D/eps) f + cmax + g1
  Scalar q_difference_bound(Index q, Scalar c_max) const {
    return Scalar(2) / epsilon * f(q) * f(q) + Scalar(4) * D / epsilon * f(q) + c_max + g1;
  }

  bool in_core(Index q) const { return std::binary_search(core.begin(), core.end(), q); }
};

/// K from the core's one-step successors.
template <typename Scalar>
Scalar core_successor_bound(const MarkovKernel<Scalar>& kernel, const Vector<Scalar>& f, const std::vector<Index>& core,
                            Scalar epsilon) {
  Scalar K = 0;
  for (Index q : core)
    for (Index a = 0; a < kernel.actions(); ++a)
      kernel.for_each_successor(q, a, [&](Index next, Scalar) { K = std::max(K, Scalar(2) / epsilon * f(next) * f(next)); });
  return K;
}

/// g1 = 2D^2/eps + (K + C_B)(1 + T_B/p_B^2) + (g/eps)(T_B/p_B^2)
template <typename Scalar>
Scalar aggregate_constant(const DriftCertificate<Scalar>& c) {
  const Scalar occ = c.occupancy_bound();
  return Scalar(2) * c.D * c.D / c.epsilon + (c.K + c.C_B) * (Scalar(1) + occ) + c.g / c.epsilon * occ;
}

/**
 * Per-state step-size denominators
 *   M_q = 2 delta(q) + (2/eps) f^2(q) + (4D/eps) f(q) + cmax(q) + g1,
 * with the linear term replaced by the constant 4D/eps under StepBoundForm::Theorem.
 */
template <typename Scalar>
Vector<Scalar> assemble_M(const DriftCertificate<Scalar>& cert, const Vector<Scalar>& c_max,
                          const Vector<Scalar>& delta, StepBoundForm form = StepBoundForm::Appendix) {
  const Index n = cert.f.size();
  if (c_max.size() != n || delta.size() != n) throw DimensionError("assemble_M inputs disagree on state count");
  if ((delta.array() < Scalar(0)).any()) throw Error("evaluation error bound delta must be nonnegative");
  const auto f = cert.f.array();
  const auto linear = form == StepBoundForm::Appendix ? (Scalar(4) * cert.D / cert.epsilon * f).eval()
                                                      : Vector<Scalar>::Constant(n, Scalar(4) * cert.D / cert.epsilon).array().eval();
  return (Scalar(2) * delta.array() + Scalar(2) / cert.epsilon * f.square() + linear + c_max.array() + cert.g1).matrix();
}

struct CertifyOptions {
  DriftFitOptions fit;
  std::optional<Index> max_reachability_steps;
  /// Use the policy-free minimum-kernel bound instead of the family estimate.
  bool uniform_reachability = false;
  StepBoundForm form = StepBoundForm::Appendix;
};

/// Fits (eps, g), derives the core, D, K, C_B, (T_B, p_B), g1 and M (delta = 0).
template <typename Scalar>
DriftCertificate<Scalar> certify(const MarkovKernel<Scalar>& kernel, const CostModel<Scalar>& cost,
                                 const Vector<Scalar>& f, std::span<const StochasticPolicy<Scalar>> family,
                                 CertifyOptions options = {}) {
  detail::check_cost_shape(kernel, cost);
  const Vector<Scalar> c_max = cost.max_cost();
  const Vector<Scalar> c_min = cost.min_cost();
  const auto fit = fit_drift_constants(kernel, family, f, c_max, c_min, options.fit);

  DriftCertificate<Scalar> cert;
  cert.f = f;
  cert.epsilon = fit.epsilon;
  cert.g = fit.g;
  cert.core = fit.core;
  cert.D = compute_D(kernel, f);
  cert.reference = cert.core.front();
  for (Index q : cert.core)
    if (c_min(q) < c_min(cert.reference)) cert.reference = q;
  cert.K = core_successor_bound(kernel, f, cert.core, cert.epsilon);
  cert.C_B = 0;
  for (Index q : cert.core) cert.C_B = std::max(cert.C_B, c_max(q));
  const auto reach = options.uniform_reachability
                         ? uniform_TB_pB(kernel, cert.core, options.max_reachability_steps)
                         : estimate_TB_pB(kernel, family, cert.core, options.max_reachability_steps);
  cert.T_B = reach.T_B;
  cert.p_B = reach.p_B;
  cert.g1 = aggregate_constant(cert);
  cert.M = assemble_M(cert, c_max, Vector<Scalar>(Vector<Scalar>::Zero(kernel.states())), options.form);
  return cert;
}

// ---------------------------------------------------------------------------
// Numerical lemma checks
// ---------------------------------------------------------------------------

enum class Lemma { AverageCost, CoreOccupancy, ValueLowerBound, QDifference };

inline const char* lemma_name(Lemma l) {
  switch (l) {
    case Lemma::AverageCost: return "average-cost";
    case Lemma::CoreOccupancy: return "core-occupancy";
    case Lemma::ValueLowerBound: return "value-lower-bound";
    case Lemma::QDifference: return "q-difference";
  }
  return "?";
}

struct LemmaViolation {
  Lemma lemma;
  std::size_t policy;
  Index state;
  double value;
  double bound;
};

struct LemmaReport {
  std::size_t policies = 0;
  std::vector<LemmaViolation> violations;
  // Tightest observed value / bound per lemma (for the value lower bound: V / bound, both negative).
  double max_cost_ratio = 0;
  double max_occupancy_ratio = 0;
  double max_value_ratio = 0;
  double max_q_difference_ratio = 0;

  bool passed() const { return violations.empty(); }
};

/// E[sum_{k < tau} 1(q_k in core) | q_0 = q], tau the first hitting time of `reference`.
template <typename Scalar>
Vector<Scalar> expected_core_occupancy(const SparseRows<Scalar>& P, const std::vector<Index>& core, Index reference) {
  const Index n = P.rows();
  // Unknowns are all states except the reference, kept in original order.
  auto slot = [reference](Index q) { return q < reference ? q : q - 1; };
  Vector<Scalar> rhs = Vector<Scalar>::Zero(n - 1);
  for (Index q : core)
    if (q != reference) rhs(slot(q)) = 1;
  std::vector<Eigen::Triplet<Scalar>> t;
  for (Index q = 0; q < n; ++q) {
    if (q == reference) continue;
    t.emplace_back(slot(q), slot(q), Scalar(1));
    for (typename SparseRows<Scalar>::InnerIterator it(P, q); it; ++it)
      if (it.col() != reference) t.emplace_back(slot(q), slot(it.col()), -it.value());
  }
  Eigen::SparseMatrix<Scalar> A(n - 1, n - 1);
  A.setFromTriplets(t.begin(), t.end());
  Eigen::SparseLU<Eigen::SparseMatrix<Scalar>> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success) throw Error("absorbing-chain system is singular");
  const Vector<Scalar> x = lu.solve(rhs);
  Vector<Scalar> out(n);
  for (Index q = 0; q < n; ++q) out(q) = q == reference ? Scalar(0) : x(slot(q));
  return out;
}

/**
 * For every policy, solves Poisson's equation exactly (anchored at the
 * certificate's reference state) and checks
 *   J_pi <= g/eps,
 *   expected core occupancy before hitting the reference <= T_B/p_B^2,
 *   V_pi(q) >= -(g/eps)(T_B/p_B^2),
 *   |Q_pi(q,a) - Q_pi(q,a')| <= (2/eps) f^2 + (4D/eps) f + cmax + g1.
 */
template <typename Scalar>
LemmaReport check_lemma_bounds(const DriftCertificate<Scalar>& cert, const MarkovKernel<Scalar>& kernel,
                               const CostModel<Scalar>& cost, std::span<const StochasticPolicy<Scalar>> policies) {
  const Vector<Scalar> c_max = cost.max_cost();
  const double slack = 1e-9;
  PoissonSolver<Scalar> solver(kernel, cert.reference);
  LemmaReport report;
  report.policies = policies.size();
  auto record = [&](Lemma lemma, std::size_t k, Index q, double value, double bound) {
    if (value > bound + slack * std::max(1.0, std::abs(bound))) report.violations.push_back({lemma, k, q, value, bound});
  };
  const double cost_bound = static_cast<double>(cert.average_cost_bound());
  const double occ_bound = static_cast<double>(cert.occupancy_bound());
  const double v_bound = static_cast<double>(cert.value_lower_bound());
  for (std::size_t k = 0; k < policies.size(); ++k) {
    const auto& pi = policies[k];
    const SparseRows<Scalar> P = induced_kernel(kernel, pi);
    const auto sol = solver.solve(P, policy_cost(cost, pi));
    const auto qf = q_from_v(kernel, cost, sol.V, sol.J);

    const double J = static_cast<double>(sol.J);
    record(Lemma::AverageCost, k, -1, J, cost_bound);
    report.max_cost_ratio = std::max(report.max_cost_ratio, J / cost_bound);

    const Vector<Scalar> occ = expected_core_occupancy(P, cert.core, cert.reference);
    for (Index q = 0; q < kernel.states(); ++q) {
      const double o = static_cast<double>(occ(q));
      record(Lemma::CoreOccupancy, k, q, o, occ_bound);
      report.max_occupancy_ratio = std::max(report.max_occupancy_ratio, o / occ_bound);

      const double v = static_cast<double>(sol.V(q));
      // V >= bound  <=>  -V <= -bound
      record(Lemma::ValueLowerBound, k, q, -v, -v_bound);
      if (v < 0) report.max_value_ratio = std::max(report.max_value_ratio, v / v_bound);

      const double spread = static_cast<double>(qf.Q.row(q).maxCoeff() - qf.Q.row(q).minCoeff());
      const double qb = static_cast<double>(cert.q_difference_bound(q, c_max(q)));
      record(Lemma::QDifference, k, q, spread, qb);
      report.max_q_difference_ratio = std::max(report.max_q_difference_ratio, spread / qb);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Flat key=value serialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename Vec>
std::string join_csv(const Vec& v) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (Index i = 0; i < static_cast<Index>(v.size()); ++i) {
    if (i) out << ',';
    out << v[static_cast<std::size_t>(i)];
  }
  return out.str();
}

inline std::vector<double> split_csv(const std::string& s) {
  std::vector<double> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(std::stod(item));
  return out;
}

}  // namespace detail

template <typename Scalar>
void write_certificate(std::ostream& out, const DriftCertificate<Scalar>& c) {
  out << std::setprecision(17);
  out << "epsilon=" << c.epsilon << '\n'
      << "g=" << c.g << '\n'
      << "D=" << c.D << '\n'
      << "T_B=" << c.T_B << '\n'
      << "p_B=" << c.p_B << '\n'
      << "g1=" << c.g1 << '\n'
      << "K=" << c.K << '\n'
      << "C_B=" << c.C_B << '\n'
      << "core_size=" << c.core.size() << '\n'
      << "reference=" << c.reference << '\n'
      << "core=" << detail::join_csv(c.core) << '\n'
      << "f=" << detail::join_csv(std::vector<Scalar>(c.f.data(), c.f.data() + c.f.size())) << '\n'
      << "M=" << detail::join_csv(std::vector<Scalar>(c.M.data(), c.M.data() + c.M.size())) << '\n';
}

inline DriftCertificate<double> read_certificate(std::istream& in) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("malformed certificate line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw Error("certificate is missing '" + key + "'");
    return it->second;
  };
  auto to_vector = [](const std::vector<double>& v) {
    return Vector<double>(Eigen::Map<const Vector<double>>(v.data(), static_cast<Index>(v.size())));
  };
  DriftCertificate<double> c;
  c.epsilon = std::stod(get("epsilon"));
  c.g = std::stod(get("g"));
  c.D = std::stod(get("D"));
  c.T_B = std::stol(get("T_B"));
  c.p_B = std::stod(get("p_B"));
  c.g1 = std::stod(get("g1"));
  c.K = std::stod(get("K"));
  c.C_B = std::stod(get("C_B"));
  c.reference = std::stol(get("reference"));
  for (double v : detail::split_csv(get("core"))) c.core.push_back(static_cast<Index>(v));
  if (c.core.size() != std::stoul(get("core_size"))) throw Error("certificate core_size disagrees with core list");
  c.f = to_vector(detail::split_csv(get("f")));
  c.M = to_vector(detail::split_csv(get("M")));
  return c;
}

}  // namespace npgq
