#include <CLI11.hpp>

#include <iostream>

#include "npgq/config.hpp"
#include "npgq/experiment.hpp"

namespace {

struct Options {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::optional<std::size_t> iters;
};

using Command = int (*)(const npgq::ExperimentConfig&, const std::filesystem::path&, std::ostream&);

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "key=value config file")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", o.out, "output directory")->capture_default_str();
  sub->add_option("--seed", o.seed, "override run.seed");
  sub->add_option("--runs", o.runs, "override run.runs");
  sub->add_option("--iters", o.iters, "override npg.iterations (sweep: sweep.max_iterations)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NPG with state-dependent step sizes on queueing MDPs"};
  app.set_version_flag("--version", npgq::kVersion);
  app.require_subcommand(1);
  Options o;
  const std::pair<const char*, const char*> names[] = {
      {"solve", "relative value iteration: J* and the optimal policy"},
      {"verify", "fit the drift certificate and check the lemma bounds"},
      {"train", "NPG learning curves over seeds and schedules"},
      {"sweep", "noiseless iterations-to-threshold across buffer sizes"}};
  for (const auto& [name, help] : names) add_common(app.add_subcommand(name, help), o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? npgq::kExitOk : npgq::kExitConfig;
  }

  const std::string which = app.get_subcommands().front()->get_name();
  Command cmd = which == "solve"    ? &npgq::cmd_solve
                : which == "verify" ? &npgq::cmd_verify
                : which == "train"  ? &npgq::cmd_train
                                    : &npgq::cmd_sweep;
  try {
    auto cfg = npgq::load_config(o.config);
    if (o.seed) cfg.run.seed = *o.seed;
    if (o.runs) cfg.run.runs = *o.runs;
    if (o.iters) (which == "sweep" ? cfg.sweep.max_iterations : cfg.npg.iterations) = *o.iters;
    cfg.validate();
    return cmd(cfg, o.out, std::cout);
  } catch (const npgq::ConfigError& e) {
    std::cerr << "config error: " << o.config << ": " << e.what() << '\n';
    return npgq::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return npgq::kExitRuntime;
  }
}
