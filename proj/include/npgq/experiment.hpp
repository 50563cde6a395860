#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "npgq/config.hpp"
#include "npgq/drift.hpp"
#include "npgq/npg.hpp"
#include "npgq/queueing.hpp"

namespace npgq {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitViolation = 2, kExitRuntime = 3 };

/// Runs fn(i) for i in [0, jobs) on at most `workers` threads (0: hardware concurrency).
/// The first exception thrown by any job is rethrown after all threads join.
void parallel_for(std::size_t jobs, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Seed for the trajectory used at NPG iteration `iteration` of the run seeded `run_seed`.
std::uint64_t trajectory_seed(std::uint64_t run_seed, std::size_t iteration);

EnvSpec env_for_buffer(const ExperimentConfig& cfg, int buffer);

/// The drift certificate `verify` emits: family from the optimal policy plus `cfg.verify.family` random ones.
DriftCertificate<double> certify_env(const ExperimentConfig& cfg, const QueueingEnv<double>& env,
                                     const OptimalSolution<double>& optimum);

StepSizeSchedule make_schedule(const ExperimentConfig& cfg, StepKind kind, const QueueingEnv<double>& env, double k,
                               std::size_t horizon);

/// One NPG run under the configured evaluator, schedule and optional MaxWeight mixing.
NPGResult<double> run_configured_npg(const ExperimentConfig& cfg, const QueueingEnv<double>& env,
                                     const StepSizeSchedule& schedule, std::uint64_t seed, NPGOptions options);

struct SweepRow {
  int buffer = 0;
  StepKind schedule = StepKind::AdaptiveKF2;
  double step = 0;  ///< k for adaptive runs, eta for fixed runs
  double threshold = 0;
  std::size_t cap = 0;
  std::optional<std::size_t> iterations;
  std::vector<double> J;
};

/// Noiseless iterations-to-threshold for every (buffer, schedule) pair.
std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg);

struct TrainRun {
  StepKind schedule = StepKind::AdaptiveKF2;
  std::uint64_t seed = 0;
  std::vector<double> J;
};

struct TrainCurve {
  StepKind schedule = StepKind::AdaptiveKF2;
  std::vector<double> mean;
  std::vector<double> stddev;
};

struct TrainResult {
  std::vector<TrainRun> runs;
  std::vector<TrainCurve> curves;
};

TrainResult run_train(const ExperimentConfig& cfg);

int cmd_solve(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);
int cmd_verify(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);
int cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);
int cmd_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log);

}  // namespace npgq
