#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "npgq/mdp.hpp"
#include "npgq/queueing.hpp"

namespace npgq {

/// Rows drawn uniformly from the simplex (normalized unit exponentials).
template <typename Scalar>
StochasticPolicy<Scalar> random_stochastic_policy(Index states, Index actions, std::mt19937_64& rng) {
  Table<Scalar> p(states, actions);
  for (Index q = 0; q < states; ++q) {
    for (Index a = 0; a < actions; ++a) {
      // 1 - u lies in (0, 1], so the log is finite.
      p(q, a) = static_cast<Scalar>(-std::log(1.0 - detail::uniform01(rng)));
    }
    p.row(q) /= p.row(q).sum();
  }
  return StochasticPolicy<Scalar>(std::move(p));
}

/// One independently uniform action per state.
template <typename Scalar>
StochasticPolicy<Scalar> random_deterministic_policy(Index states, Index actions, std::mt19937_64& rng) {
  std::vector<Index> choice(static_cast<std::size_t>(states));
  for (auto& a : choice) a = static_cast<Index>(rng() % static_cast<std::uint64_t>(actions));
  return StochasticPolicy<Scalar>::deterministic(choice, actions);
}

template <typename Scalar>
StochasticPolicy<Scalar> constant_action_policy(Index states, Index actions, Index action) {
  std::vector<Index> choice(static_cast<std::size_t>(states), action);
  return StochasticPolicy<Scalar>::deterministic(choice, actions);
}

}  // namespace npgq
