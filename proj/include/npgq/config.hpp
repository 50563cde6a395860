#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include "npgq/drift.hpp"
#include "npgq/npg.hpp"
#include "npgq/policy_eval.hpp"
#include "npgq/queueing.hpp"

namespace npgq {

inline constexpr const char* kVersion = "npgq 0.1.0";

enum class EvalMode { Exact, TD };

struct EvalConfig {
  EvalMode mode = EvalMode::Exact;
  TDConfig td;
};

struct NpgConfig {
  std::vector<StepKind> schedules{StepKind::AdaptiveKF2};
  double k = 1.0;
  /// Fixed step; defaults to 1/B^2 (single queue) or 1/(4B^2) (two queues).
  std::optional<double> eta;
  std::size_t iterations = 100;
  std::optional<double> threshold;
  std::optional<double> lambda_mix;
  StepBoundForm m_form = StepBoundForm::Appendix;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t runs = 1;
  std::size_t workers = 0;  ///< 0: hardware concurrency
};

/// Per-buffer lists for `sweep`; k and threshold lists are either empty, length one, or one per buffer.
struct SweepConfig {
  std::vector<int> buffers;
  std::vector<double> thresholds;
  std::vector<double> k;
  std::size_t max_iterations = 200000;
};

struct VerifyConfig {
  std::size_t policies = 50;
  std::size_t family = 50;
  bool uniform_reachability = false;
};

struct ExperimentConfig {
  EnvSpec env;
  EvalConfig eval;
  NpgConfig npg;
  RunConfig run;
  SweepConfig sweep;
  VerifyConfig verify;

  double fixed_eta(int buffer) const;
  double k_for(std::size_t sweep_index) const;
  std::optional<double> threshold_for(std::size_t sweep_index) const;
  std::vector<int> sweep_buffers() const;
  void validate() const;

  /// Fully resolved key=value lines, section headers included.
  std::vector<std::string> echo() const;
};

/// Throws ConfigError with the offending line and field.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::string& path);

}  // namespace npgq
