#include "npgq/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "npgq/csv.hpp"
#include "npgq/policy_eval.hpp"
#include "npgq/random_policy.hpp"

namespace npgq {

namespace {

std::string fixed4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

void ensure_dir(const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw Error("cannot create output directory '" + out.string() + "': " + ec.message());
}

double step_parameter(const StepSizeSchedule& s) { return s.kind == StepKind::Fixed ? s.eta : s.k; }

}  // namespace

void parallel_for(std::size_t jobs, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, jobs);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = jobs;
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

std::uint64_t trajectory_seed(std::uint64_t run_seed, std::size_t iteration) {
  return splitmix64(splitmix64(run_seed) ^ static_cast<std::uint64_t>(iteration));
}

EnvSpec env_for_buffer(const ExperimentConfig& cfg, int buffer) {
  EnvSpec spec = cfg.env;
  spec.buffer = buffer;
  return spec;
}

DriftCertificate<double> certify_env(const ExperimentConfig& cfg, const QueueingEnv<double>& env,
                                     const OptimalSolution<double>& optimum) {
  const Vector<double> f = lyapunov_values<double>(env.space);
  const auto family = certificate_family<double>(env.kernel, f, optimum.policy(env.kernel.actions()),
                                                 static_cast<int>(cfg.verify.family), cfg.run.seed);
  CertifyOptions options;
  options.form = cfg.npg.m_form;
  options.uniform_reachability = cfg.verify.uniform_reachability;
  return certify<double>(env.kernel, env.cost, f, family, options);
}

StepSizeSchedule make_schedule(const ExperimentConfig& cfg, StepKind kind, const QueueingEnv<double>& env, double k,
                               std::size_t horizon) {
  switch (kind) {
    case StepKind::Fixed: return StepSizeSchedule::fixed(cfg.fixed_eta(env.spec.buffer));
    case StepKind::AdaptiveKF2: return StepSizeSchedule::adaptive(k);
    case StepKind::TheoremM: {
      const auto optimum = relative_value_iteration(env.kernel, env.cost);
      const auto cert = certify_env(cfg, env, optimum);
      return StepSizeSchedule::theorem(std::vector<double>(cert.M.data(), cert.M.data() + cert.M.size()),
                                       std::max<std::size_t>(horizon, 1), env.kernel.actions());
    }
  }
  throw Error("unknown step-size schedule");
}

NPGResult<double> run_configured_npg(const ExperimentConfig& cfg, const QueueingEnv<double>& env,
                                     const StepSizeSchedule& schedule, std::uint64_t seed, NPGOptions options) {
  const Vector<double> f = lyapunov_values<double>(env.space);
  Evaluator<double> evaluate;
  if (cfg.eval.mode == EvalMode::Exact) {
    evaluate = exact_evaluator(env.kernel, env.cost);
  } else {
    const Index ref = reference_state(env.cost);
    const TDConfig td = cfg.eval.td;
    evaluate = [&env, td, ref, seed](const StochasticPolicy<double>& pi, std::size_t i) {
      const auto traj = sample_trajectory(env.kernel, env.cost, pi, td.n, trajectory_seed(seed, i), 0);
      const double J_hat = estimate_average_cost(traj);
      auto qf = td_lambda_evaluate(traj, J_hat, td, pi, ref);
      return Evaluation<double>{std::move(qf.Q), std::nullopt};
    };
  }
  Enactment<double> enact;
  if (cfg.npg.lambda_mix) {
    const double lambda_mix = *cfg.npg.lambda_mix;
    enact = [&env, lambda_mix](const StochasticPolicy<double>& pi) { return mix_with_maxweight(env, pi, lambda_mix); };
  }
  return run_npg<double>(env.kernel, env.cost, f, evaluate, schedule, options, enact);
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg) {
  const auto buffers = cfg.sweep_buffers();
  struct Job {
    std::size_t buffer_index;
    StepKind kind;
  };
  std::vector<Job> jobs;
  for (std::size_t b = 0; b < buffers.size(); ++b) {
    if (!cfg.threshold_for(b)) throw ConfigError("sweep needs a threshold per buffer", 0, "sweep.thresholds");
    for (StepKind kind : cfg.npg.schedules) jobs.push_back({b, kind});
  }
  ExperimentConfig exact = cfg;
  exact.eval.mode = EvalMode::Exact;
  std::vector<SweepRow> rows(jobs.size());
  parallel_for(jobs.size(), cfg.run.workers, [&](std::size_t j) {
    const auto& job = jobs[j];
    const int buffer = buffers[job.buffer_index];
    const auto env = build_env<double>(env_for_buffer(exact, buffer));
    const auto schedule = make_schedule(exact, job.kind, env, exact.k_for(job.buffer_index), exact.sweep.max_iterations);
    NPGOptions options;
    options.iterations = exact.sweep.max_iterations;
    options.threshold = *exact.threshold_for(job.buffer_index);
    options.stop_at_threshold = true;
    const auto result = run_configured_npg(exact, env, schedule, exact.run.seed, options);
    SweepRow& row = rows[j];
    row.buffer = buffer;
    row.schedule = job.kind;
    row.step = step_parameter(schedule);
    row.threshold = *options.threshold;
    row.cap = options.iterations;
    row.iterations = result.reached;
    row.J = result.J;
  });
  return rows;
}

TrainResult run_train(const ExperimentConfig& cfg) {
  const auto env = build_env<double>(cfg.env);
  const std::size_t runs = cfg.run.runs;
  std::vector<StepSizeSchedule> schedules;
  for (StepKind kind : cfg.npg.schedules) schedules.push_back(make_schedule(cfg, kind, env, cfg.npg.k, cfg.npg.iterations));
  TrainResult out;
  out.runs.resize(schedules.size() * runs);
  parallel_for(out.runs.size(), cfg.run.workers, [&](std::size_t j) {
    const std::size_t s = j / runs;
    const std::uint64_t seed = cfg.run.seed + j % runs;
    NPGOptions options;
    options.iterations = cfg.npg.iterations;
    const auto result = run_configured_npg(cfg, env, schedules[s], seed, options);
    out.runs[j] = TrainRun{schedules[s].kind, seed, result.J};
  });
  for (std::size_t s = 0; s < schedules.size(); ++s) {
    TrainCurve curve;
    curve.schedule = schedules[s].kind;
    for (std::size_t i = 0; i < cfg.npg.iterations; ++i) {
      double sum = 0;
      for (std::size_t r = 0; r < runs; ++r) sum += out.runs[s * runs + r].J[i];
      const double mean = sum / static_cast<double>(runs);
      double ss = 0;
      for (std::size_t r = 0; r < runs; ++r) ss += std::pow(out.runs[s * runs + r].J[i] - mean, 2);
      curve.mean.push_back(mean);
      curve.stddev.push_back(runs > 1 ? std::sqrt(ss / static_cast<double>(runs - 1)) : 0.0);
    }
    out.curves.push_back(std::move(curve));
  }
  return out;
}

int cmd_solve(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
  ensure_dir(out);
  const auto env = build_env<double>(cfg.env);
  for (const auto& w : cfg.env.warnings()) log << "warning: " << w << '\n';
  const auto opt = relative_value_iteration(env.kernel, env.cost);
  CsvWriter csv(out / "solve.csv", cfg, "solve");
  std::vector<std::string> cols{"state"};
  for (int j = 0; j < env.space.queues(); ++j) cols.push_back("q" + std::to_string(j + 1));
  cols.push_back("action");
  for (int j = 0; j < env.space.queues(); ++j) cols.push_back("rate" + std::to_string(j + 1));
  cols.push_back("V");
  csv.columns(cols);
  for (Index q = 0; q < env.space.size(); ++q) {
    const auto state = env.space.decode(q);
    const Index a = opt.actions[static_cast<std::size_t>(q)];
    std::vector<std::string> row{std::to_string(q)};
    for (int j = 0; j < env.space.queues(); ++j) row.push_back(std::to_string(state[j]));
    row.push_back(std::to_string(a));
    for (int r : env.actions.decode(a))
      row.push_back(format_number(cfg.env.service_rates[static_cast<std::size_t>(r)]));
    row.push_back(format_number(opt.V(q)));
    csv.row(row);
  }
  log << "J* = " << fixed4(opt.J) << "  (bracket " << format_number(opt.lower_bound) << " .. "
      << format_number(opt.upper_bound) << ", " << opt.iterations << " sweeps)\n";
  return kExitOk;
}

int cmd_verify(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
  ensure_dir(out);
  const auto env = build_env<double>(cfg.env);
  const auto opt = relative_value_iteration(env.kernel, env.cost);
  DriftCertificate<double> cert;
  try {
    cert = certify_env(cfg, env, opt);
  } catch (const CertificateError& e) {
    log << "certificate infeasible: " << e.what();
    if (!e.states().empty()) {
      log << " (states";
      for (long s : e.states()) log << ' ' << s;
      log << ')';
    }
    log << '\n';
    return kExitViolation;
  }
  {
    std::ofstream file(out / "certificate.txt");
    if (!file) throw Error("cannot write certificate file");
    for (const auto& line : header_lines(cfg, "verify")) file << line << '\n';
    write_certificate(file, cert);
  }

  std::mt19937_64 rng(cfg.run.seed);
  std::vector<StochasticPolicy<double>> policies;
  for (std::size_t i = 0; i < cfg.verify.policies; ++i)
    policies.push_back(random_stochastic_policy<double>(env.kernel.states(), env.kernel.actions(), rng));
  const auto report = check_lemma_bounds<double>(cert, env.kernel, env.cost, policies);

  CsvWriter csv(out / "lemma_report.csv", cfg, "verify");
  csv.columns({"lemma", "policies", "violations", "max_ratio", "status"});
  const std::pair<Lemma, double> lemmas[] = {{Lemma::AverageCost, report.max_cost_ratio},
                                             {Lemma::CoreOccupancy, report.max_occupancy_ratio},
                                             {Lemma::ValueLowerBound, report.max_value_ratio},
                                             {Lemma::QDifference, report.max_q_difference_ratio}};
  for (const auto& [lemma, ratio] : lemmas) {
    std::size_t count = 0;
    for (const auto& v : report.violations) count += v.lemma == lemma;
    csv.row({lemma_name(lemma), std::to_string(report.policies), std::to_string(count), format_number(ratio),
             count ? "FAIL" : "PASS"});
    log << lemma_name(lemma) << ": " << (count ? "FAIL" : "PASS") << " (" << count << " violations, max ratio "
        << format_number(ratio) << ")\n";
  }
  log << "|B| = " << cert.core.size() << "  epsilon = " << format_number(cert.epsilon)
      << "  g = " << format_number(cert.g) << "  D = " << format_number(cert.D) << "  T_B = " << cert.T_B
      << "  p_B = " << format_number(cert.p_B) << "  g1 = " << format_number(cert.g1) << '\n';
  return report.passed() ? kExitOk : kExitViolation;
}

int cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
  ensure_dir(out);
  const auto result = run_train(cfg);
  const std::string B = std::to_string(cfg.env.buffer);
  {
    CsvWriter csv(out / "train.csv", cfg, "train");
    csv.columns({"iteration", "mean_J", "std_J", "schedule", "B"});
    for (const auto& c : result.curves)
      for (std::size_t i = 0; i < c.mean.size(); ++i)
        csv.row({std::to_string(i), format_number(c.mean[i]), format_number(c.stddev[i]), step_kind_name(c.schedule), B});
  }
  {
    CsvWriter csv(out / "train_runs.csv", cfg, "train");
    csv.columns({"iteration", "J_exact", "eta_mode", "seed"});
    for (const auto& r : result.runs)
      for (std::size_t i = 0; i < r.J.size(); ++i)
        csv.row({std::to_string(i), format_number(r.J[i]), step_kind_name(r.schedule), std::to_string(r.seed)});
  }
  for (const auto& c : result.curves) {
    if (c.mean.empty()) continue;
    const std::size_t tail = std::min<std::size_t>(50, c.mean.size());
    double sum = 0;
    for (std::size_t i = c.mean.size() - tail; i < c.mean.size(); ++i) sum += c.mean[i];
    log << step_kind_name(c.schedule) << ": final J = " << fixed4(c.mean.back()) << ", last-" << tail
        << " mean = " << fixed4(sum / static_cast<double>(tail)) << '\n';
  }
  return kExitOk;
}

int cmd_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log) {
  ensure_dir(out);
  const auto rows = run_sweep(cfg);
  CsvWriter csv(out / "sweep.csv", cfg, "sweep");
  csv.columns({"B", "schedule", "step", "threshold", "iterations_to_threshold"});
  for (const auto& r : rows) {
    const std::string count =
        r.iterations ? std::to_string(*r.iterations) : "not reached (" + std::to_string(r.cap) + ")";
    csv.row({std::to_string(r.buffer), step_kind_name(r.schedule), format_number(r.step), format_number(r.threshold),
             count});
    log << "B=" << r.buffer << ' ' << step_kind_name(r.schedule) << ": " << count << '\n';
  }
  return kExitOk;
}

}  // namespace npgq
