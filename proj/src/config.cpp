#include "npgq/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace npgq {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& show) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += show(v[i]);
  }
  return out;
}

double parse_double(const std::string& s) {
  double v = 0;
  const auto* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

long long parse_int(const std::string& s) {
  long long v = 0;
  const auto* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

std::size_t parse_count(const std::string& s) {
  const long long v = parse_int(s);
  if (v < 0) throw ConfigError("expected a nonnegative integer, got '" + s + "'");
  return static_cast<std::size_t>(v);
}

bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty list element");
    out.push_back(item);
  }
  if (out.empty()) throw ConfigError("expected a nonempty list");
  return out;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) out.push_back(parse_double(item));
  return out;
}

StepKind parse_schedule(const std::string& s) {
  if (s == "fixed") return StepKind::Fixed;
  if (s == "adaptive") return StepKind::AdaptiveKF2;
  if (s == "theorem") return StepKind::TheoremM;
  throw ConfigError("unknown schedule '" + s + "' (fixed, adaptive, theorem)");
}

using Setter = std::function<void(ExperimentConfig&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"env.kind",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "single") c.env.kind = EnvKind::SingleQueue;
         else if (v == "two_queue") c.env.kind = EnvKind::TwoQueueJsq;
         else throw ConfigError("unknown environment kind '" + v + "' (single, two_queue)");
       }},
      {"env.arrival", [](ExperimentConfig& c, const std::string& v) { c.env.arrival_rate = parse_double(v); }},
      {"env.rates", [](ExperimentConfig& c, const std::string& v) { c.env.service_rates = parse_doubles(v); }},
      {"env.costs", [](ExperimentConfig& c, const std::string& v) { c.env.action_costs = parse_doubles(v); }},
      {"env.buffer", [](ExperimentConfig& c, const std::string& v) { c.env.buffer = static_cast<int>(parse_int(v)); }},
      {"env.idle_cost", [](ExperimentConfig& c, const std::string& v) { c.env.idle_cost = parse_bool(v); }},
      {"env.uniformization",
       [](ExperimentConfig& c, const std::string& v) { c.env.uniformization = parse_double(v); }},
      {"eval.mode",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "exact") c.eval.mode = EvalMode::Exact;
         else if (v == "td") c.eval.mode = EvalMode::TD;
         else throw ConfigError("unknown evaluator '" + v + "' (exact, td)");
       }},
      {"eval.beta", [](ExperimentConfig& c, const std::string& v) { c.eval.td.beta = parse_double(v); }},
      {"eval.lambda", [](ExperimentConfig& c, const std::string& v) { c.eval.td.lambda = parse_double(v); }},
      {"eval.n", [](ExperimentConfig& c, const std::string& v) { c.eval.td.n = parse_count(v); }},
      {"eval.init", [](ExperimentConfig& c, const std::string& v) { c.eval.td.init = parse_double(v); }},
      {"eval.decay",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "constant") c.eval.td.decay = LearningRateDecay::Constant;
         else if (v == "invsqrt") c.eval.td.decay = LearningRateDecay::InvSqrt;
         else throw ConfigError("unknown decay '" + v + "' (constant, invsqrt)");
       }},
      {"npg.schedule",
       [](ExperimentConfig& c, const std::string& v) {
         c.npg.schedules.clear();
         for (const auto& s : split_list(v)) c.npg.schedules.push_back(parse_schedule(s));
       }},
      {"npg.k", [](ExperimentConfig& c, const std::string& v) { c.npg.k = parse_double(v); }},
      {"npg.eta", [](ExperimentConfig& c, const std::string& v) { c.npg.eta = parse_double(v); }},
      {"npg.iterations", [](ExperimentConfig& c, const std::string& v) { c.npg.iterations = parse_count(v); }},
      {"npg.threshold", [](ExperimentConfig& c, const std::string& v) { c.npg.threshold = parse_double(v); }},
      {"npg.lambda_mix", [](ExperimentConfig& c, const std::string& v) { c.npg.lambda_mix = parse_double(v); }},
      {"npg.m_form",
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "appendix") c.npg.m_form = StepBoundForm::Appendix;
         else if (v == "theorem") c.npg.m_form = StepBoundForm::Theorem;
         else throw ConfigError("unknown M form '" + v + "' (appendix, theorem)");
       }},
      {"run.seed",
       [](ExperimentConfig& c, const std::string& v) { c.run.seed = static_cast<std::uint64_t>(parse_count(v)); }},
      {"run.runs", [](ExperimentConfig& c, const std::string& v) { c.run.runs = parse_count(v); }},
      {"run.workers", [](ExperimentConfig& c, const std::string& v) { c.run.workers = parse_count(v); }},
      {"sweep.buffers",
       [](ExperimentConfig& c, const std::string& v) {
         c.sweep.buffers.clear();
         for (const auto& s : split_list(v)) c.sweep.buffers.push_back(static_cast<int>(parse_int(s)));
       }},
      {"sweep.thresholds", [](ExperimentConfig& c, const std::string& v) { c.sweep.thresholds = parse_doubles(v); }},
      {"sweep.k", [](ExperimentConfig& c, const std::string& v) { c.sweep.k = parse_doubles(v); }},
      {"sweep.max_iterations",
       [](ExperimentConfig& c, const std::string& v) { c.sweep.max_iterations = parse_count(v); }},
      {"verify.policies", [](ExperimentConfig& c, const std::string& v) { c.verify.policies = parse_count(v); }},
      {"verify.family", [](ExperimentConfig& c, const std::string& v) { c.verify.family = parse_count(v); }},
      {"verify.uniform_reachability",
       [](ExperimentConfig& c, const std::string& v) { c.verify.uniform_reachability = parse_bool(v); }},
  };
  return table;
}

}  // namespace

double ExperimentConfig::fixed_eta(int buffer) const {
  if (npg.eta) return *npg.eta;
  const double b = buffer;
  return env.kind == EnvKind::SingleQueue ? 1.0 / (b * b) : 1.0 / (4.0 * b * b);
}

double ExperimentConfig::k_for(std::size_t i) const {
  if (sweep.k.empty()) return npg.k;
  return sweep.k.size() == 1 ? sweep.k.front() : sweep.k.at(i);
}

std::optional<double> ExperimentConfig::threshold_for(std::size_t i) const {
  if (sweep.thresholds.empty()) return npg.threshold;
  return sweep.thresholds.size() == 1 ? sweep.thresholds.front() : sweep.thresholds.at(i);
}

std::vector<int> ExperimentConfig::sweep_buffers() const {
  return sweep.buffers.empty() ? std::vector<int>{env.buffer} : sweep.buffers;
}

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& field, const std::string& what) {
    if (!ok) throw ConfigError(what, 0, field);
  };
  try {
    env.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what(), 0, "env");
  }
  eval.td.validate();
  check(!npg.schedules.empty(), "npg.schedule", "at least one schedule is required");
  check(npg.k > 0, "npg.k", "must be positive");
  check(!npg.eta || *npg.eta > 0, "npg.eta", "must be positive");
  check(!npg.lambda_mix || *npg.lambda_mix > 0, "npg.lambda_mix", "must be positive");
  check(run.runs >= 1, "run.runs", "must be at least 1");
  const std::size_t nb = sweep_buffers().size();
  for (int b : sweep.buffers) check(b >= 1, "sweep.buffers", "buffers must be at least 1");
  check(sweep.k.size() <= 1 || sweep.k.size() == nb, "sweep.k", "needs one value or one per buffer");
  for (double k : sweep.k) check(k > 0, "sweep.k", "must be positive");
  check(sweep.thresholds.size() <= 1 || sweep.thresholds.size() == nb, "sweep.thresholds",
        "needs one value or one per buffer");
}

std::vector<std::string> ExperimentConfig::echo() const {
  std::vector<std::string> out;
  const auto num = std::function<std::string(const double&)>(fmt);
  out.push_back("[env]");
  out.push_back(std::string("kind=") + (env.kind == EnvKind::SingleQueue ? "single" : "two_queue"));
  out.push_back("arrival=" + fmt(env.arrival_rate));
  out.push_back("rates=" + join(env.service_rates, num));
  out.push_back("costs=" + join(env.action_costs, num));
  out.push_back("buffer=" + std::to_string(env.buffer));
  out.push_back(std::string("idle_cost=") + (env.idle_cost ? "true" : "false"));
  out.push_back("uniformization=" + fmt(env.uniformization_rate()));
  out.push_back("[eval]");
  out.push_back(std::string("mode=") + (eval.mode == EvalMode::Exact ? "exact" : "td"));
  out.push_back("beta=" + fmt(eval.td.beta));
  out.push_back("lambda=" + fmt(eval.td.lambda));
  out.push_back("n=" + std::to_string(eval.td.n));
  out.push_back("init=" + fmt(eval.td.init));
  out.push_back(std::string("decay=") + (eval.td.decay == LearningRateDecay::Constant ? "constant" : "invsqrt"));
  out.push_back("[npg]");
  out.push_back("schedule=" + join(npg.schedules, std::function<std::string(const StepKind&)>(
                                                      [](const StepKind& k) { return std::string(step_kind_name(k)); })));
  out.push_back("k=" + fmt(npg.k));
  out.push_back("eta=" + (npg.eta ? fmt(*npg.eta) : fmt(fixed_eta(env.buffer))));
  out.push_back("iterations=" + std::to_string(npg.iterations));
  out.push_back("threshold=" + (npg.threshold ? fmt(*npg.threshold) : std::string("none")));
  out.push_back("lambda_mix=" + (npg.lambda_mix ? fmt(*npg.lambda_mix) : std::string("none")));
  out.push_back(std::string("m_form=") + (npg.m_form == StepBoundForm::Appendix ? "appendix" : "theorem"));
  out.push_back("[run]");
  out.push_back("seed=" + std::to_string(run.seed));
  out.push_back("runs=" + std::to_string(run.runs));
  out.push_back("[sweep]");
  out.push_back("buffers=" + join(sweep_buffers(), std::function<std::string(const int&)>(
                                                       [](const int& b) { return std::to_string(b); })));
  out.push_back("thresholds=" + (sweep.thresholds.empty() ? std::string("none") : join(sweep.thresholds, num)));
  out.push_back("k=" + (sweep.k.empty() ? fmt(npg.k) : join(sweep.k, num)));
  out.push_back("max_iterations=" + std::to_string(sweep.max_iterations));
  out.push_back("[verify]");
  out.push_back("policies=" + std::to_string(verify.policies));
  out.push_back("family=" + std::to_string(verify.family));
  out.push_back(std::string("uniform_reachability=") + (verify.uniform_reachability ? "true" : "false"));
  return out;
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::map<std::string, int> where;
  std::string section;
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("unterminated section header", line_no);
      section = trim(line.substr(1, line.size() - 2));
      if (section != "env" && section != "eval" && section != "npg" && section != "run" && section != "sweep" &&
          section != "verify")
        throw ConfigError("unknown section '" + section + "'", line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError("key outside of any section", line_no, key);
    const std::string field = section + "." + key;
    const auto it = setters().find(field);
    if (it == setters().end()) throw ConfigError("unknown key", line_no, field);
    if (where.count(field)) throw ConfigError("duplicate key", line_no, field);
    try {
      it->second(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(e.message(), line_no, field);
    }
    where[field] = line_no;
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    const auto it = where.find(e.field());
    throw ConfigError(e.message(), it == where.end() ? 0 : it->second, e.field());
  } catch (const Error& e) {
    throw ConfigError(e.what(), 0, "eval");
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_config(in);
}

}  // namespace npgq
