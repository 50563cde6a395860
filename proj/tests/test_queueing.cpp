#include <doctest.h>

#include <cstring>
#include <map>
#include <random>

#include "npgq/policy_eval.hpp"
#include "npgq/queueing.hpp"
#include "npgq/random_policy.hpp"

using namespace npgq;

namespace {

Index state2(const QueueingEnv<double>& env, int q1, int q2) {
  QueueState q(2);
  q << q1, q2;
  return env.space.encode(q);
}

}  // namespace

TEST_CASE("single queue environment") {
  const auto env = build_single_queue<double>(0.45, 0.5, 0.8, 1, 10, 20);
  CHECK(env.kernel.states() == 21);
  CHECK(env.kernel.actions() == 2);
  CHECK(env.spec.uniformization_rate() == doctest::Approx(1.25));

  SUBCASE("costs") {
    CHECK(env.cost(20, 0) == 21.0);
    CHECK(env.cost(7, 1) == 17.0);
    // The rate cost is charged only while serving.
    CHECK(env.cost(0, 1) == 0.0);
    const auto literal = build_single_queue<double>(0.45, 0.5, 0.8, 1, 10, 20, true);
    CHECK(literal.cost(0, 1) == 10.0);
    CHECK(literal.cost(20, 0) == 21.0);
  }
  SUBCASE("uniformized row at q=1 under mu2") {
    const auto b2 = build_single_queue<double>(0.45, 0.5, 0.8, 1, 10, 2);
    CHECK(b2.kernel.probability(1, 1, 2) == doctest::Approx(0.36).epsilon(1e-15));
    CHECK(b2.kernel.probability(1, 1, 0) == doctest::Approx(0.64).epsilon(1e-15));
    CHECK(b2.kernel.probability(1, 1, 1) == 0.0);
  }
  SUBCASE("full buffer drops arrivals") {
    CHECK(env.kernel.probability(20, 0, 19) == doctest::Approx(0.4));
    CHECK(env.kernel.probability(20, 0, 20) == doctest::Approx(0.6));
  }
  SUBCASE("rows sum to one and stay in range") {
    for (Index a = 0; a < 2; ++a)
      for (Index q = 0; q < 21; ++q) {
        double sum = 0;
        env.kernel.for_each_successor(q, a, [&](Index next, double p) {
          CHECK(next >= 0);
          CHECK(next < 21);
          CHECK(std::abs(next - q) <= 1);
          sum += p;
        });
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      }
  }
  SUBCASE("irreducible under the uniform policy") {
    CHECK(is_irreducible(induced_kernel(env.kernel, StochasticPolicy<double>::uniform(21, 2))));
  }
}

TEST_CASE("two-queue JSQ environment") {
  const auto env = build_two_queue_jsq<double>(0.45, {0.25, 0.3}, {1, 10}, 10);
  CHECK(env.kernel.states() == 121);
  CHECK(env.kernel.actions() == 4);
  CHECK(env.spec.uniformization_rate() == doctest::Approx(1.05));
  const double arrive = 0.45 / 1.05;

  SUBCASE("actions encode as first-queue-major") {
    CHECK(env.actions.encode({1, 0}) == 2);
    CHECK(env.actions.decode(3) == std::vector<int>{1, 1});
  }
  SUBCASE("arrivals join the shorter queue") {
    CHECK(env.kernel.probability(state2(env, 3, 5), 0, state2(env, 4, 5)) == doctest::Approx(arrive));
    CHECK(env.kernel.probability(state2(env, 5, 3), 0, state2(env, 5, 4)) == doctest::Approx(arrive));
    // ties go to the first queue
    CHECK(env.kernel.probability(state2(env, 2, 2), 0, state2(env, 3, 2)) == doctest::Approx(arrive));
    CHECK(env.kernel.probability(state2(env, 2, 2), 0, state2(env, 2, 3)) == 0.0);
  }
  SUBCASE("departures per queue at the chosen rate") {
    const Index s = state2(env, 3, 5);
    CHECK(env.kernel.probability(s, env.actions.encode({1, 0}), state2(env, 2, 5)) == doctest::Approx(0.3 / 1.05));
    CHECK(env.kernel.probability(s, env.actions.encode({1, 0}), state2(env, 3, 4)) == doctest::Approx(0.25 / 1.05));
  }
  SUBCASE("both full drops the arrival") {
    const Index s = state2(env, 10, 10);
    CHECK(env.kernel.probability(s, 3, s) == doctest::Approx(1 - 0.6 / 1.05));
  }
  SUBCASE("costs") {
    const auto literal = build_two_queue_jsq<double>(0.45, {0.25, 0.3}, {1, 10}, 10, true);
    CHECK(literal.cost(state2(literal, 0, 0), 3) == 20.0);
    CHECK(env.cost(state2(env, 0, 0), 3) == 0.0);
    CHECK(env.cost(state2(env, 2, 0), 3) == 12.0);
    CHECK(env.cost(state2(env, 2, 4), env.actions.encode({0, 1})) == 17.0);
  }
  SUBCASE("irreducible under the uniform policy") {
    CHECK(is_irreducible(induced_kernel(env.kernel, StochasticPolicy<double>::uniform(121, 4))));
  }
}

TEST_CASE("environment spec validation") {
  EnvSpec spec;
  SUBCASE("uniformization below the event rate") {
    spec.uniformization = 1.0;
    CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("below the total event rate"), Error);
  }
  SUBCASE("mismatched costs") {
    spec.action_costs = {1.0};
    CHECK_THROWS_AS(spec.validate(), Error);
  }
  SUBCASE("nonpositive rates and buffers") {
    spec.service_rates = {0.5, 0.0};
    CHECK_THROWS_AS(spec.validate(), Error);
    spec.service_rates = {0.5, 0.8};
    spec.buffer = 0;
    CHECK_THROWS_AS(spec.validate(), Error);
  }
  SUBCASE("overload warns but builds") {
    spec.arrival_rate = 1.0;
    CHECK(spec.warnings().size() == 1);
    CHECK_NOTHROW(build_env<double>(spec));
  }
  SUBCASE("stable default has no warning") { CHECK(spec.warnings().empty()); }
}

TEST_CASE("trajectories") {
  const auto env = build_single_queue<double>(0.45, 0.5, 0.8, 1, 10, 20);
  const auto pi = StochasticPolicy<double>::uniform(21, 2);

  SUBCASE("same seed is bit-identical, other seeds differ") {
    const auto a = sample_trajectory(env.kernel, env.cost, pi, 3000, 42);
    const auto b = sample_trajectory(env.kernel, env.cost, pi, 3000, 42);
    const auto c = sample_trajectory(env.kernel, env.cost, pi, 3000, 43);
    REQUIRE(a.size() == 3000);
    CHECK(std::memcmp(a.steps.data(), b.steps.data(), a.steps.size() * sizeof(Step<double>)) == 0);
    CHECK(a.final_action == b.final_action);
    bool differ = false;
    for (std::size_t t = 0; t < a.size(); ++t) differ = differ || a.steps[t].next_state != c.steps[t].next_state;
    CHECK(differ);
  }
  SUBCASE("steps follow the kernel, chain together and carry exact costs") {
    const auto t = sample_trajectory(env.kernel, env.cost, pi, 5000, 7);
    CHECK(t.steps.front().state == 0);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto& s = t.steps[i];
      CHECK(env.kernel.probability(s.state, s.action, s.next_state) > 0);
      CHECK(s.cost == env.cost(s.state, s.action));
      if (i + 1 < t.size()) CHECK(t.steps[i + 1].state == s.next_state);
    }
  }
  SUBCASE("empirical transition frequencies pass a chi-square check") {
    const auto t = sample_trajectory(env.kernel, env.cost, pi, 100000, 9);
    std::map<std::pair<Index, Index>, std::map<Index, double>> counts;
    for (const auto& s : t.steps) counts[{s.state, s.action}][s.next_state] += 1;
    int tested = 0;
    for (const auto& [sa, next] : counts) {
      double n = 0;
      for (const auto& kv : next) n += kv.second;
      if (n < 500) continue;
      double chi2 = 0;
      int cells = 0;
      env.kernel.for_each_successor(sa.first, sa.second, [&](Index q, double p) {
        const double observed = next.count(q) ? next.at(q) : 0.0;
        chi2 += (observed - n * p) * (observed - n * p) / (n * p);
        ++cells;
      });
      // 3 cells at most, so 2 degrees of freedom; 0.1% critical value is 13.8.
      CHECK(chi2 < 13.8);
      CHECK(cells <= 3);
      ++tested;
    }
    CHECK(tested >= 10);
  }
  SUBCASE("long-run mean cost is within three standard errors of the exact J") {
    const auto t = sample_trajectory(env.kernel, env.cost, pi, 1000000, 12);
    const double J = PoissonSolver<double>(env.kernel, 0).solve(pi, env.cost).J;
    // Batch means over 100 batches for the standard error of a correlated sequence.
    const std::size_t batches = 100, len = t.size() / batches;
    std::vector<double> means(batches, 0.0);
    for (std::size_t i = 0; i < t.size(); ++i) means[i / len] += t.steps[i].cost / len;
    double mean = 0;
    for (double m : means) mean += m / batches;
    double var = 0;
    for (double m : means) var += (m - mean) * (m - mean) / (batches - 1);
    const double se = std::sqrt(var / batches);
    CHECK(std::abs(estimate_average_cost(t) - mean) < 1e-9);
    CHECK(std::abs(mean - J) < 3 * se);
  }
  SUBCASE("zero length is rejected") {
    CHECK_THROWS_AS(sample_trajectory(env.kernel, env.cost, pi, 0, 1), Error);
  }
}
