// SPDX-License-Identifier: Apache-2.0
#include <functional>
#include <iostream>

#include "CLI11.hpp"
#include "adaptkit/cli.hpp"
#include "adaptkit/errors.hpp"

namespace adaptkit::cli {

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"adaptkit: adapt pretrained language models to new languages"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> span;
  std::optional<int> workers;
  int seeds = 1;

  using Command = std::function<int(const ExperimentConfig&, const Overrides&, std::ostream&, std::ostream&)>;
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands = {
      {"adapt", {"train one adaptation run and write checkpoint, adapter bundle and run log", cmd_adapt}},
      {"eval", {"zero-shot task evaluation (single, paired or transplant mode)", cmd_eval}},
      {"probe", {"layer-wise sentence retrieval before and after adaptation", cmd_probe}},
      {"sweep", {"repeat adaptation over one axis and aggregate", cmd_sweep}},
      {"report", {"collect manifests under a directory into report tables", cmd_report}},
  };
  for (const auto& [name, desc] : commands) {
    auto* sub = app.add_subcommand(name, desc.first);
    sub->add_option("--config", config_path, "experiment INI file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides [output] dir and ADAPTKIT_OUT)");
    sub->add_option("--seed", seed, "seed for adapter init and document sampling");
    sub->add_option("--score-span", span, "whole or continuation")->check(CLI::IsMember({"whole", "continuation"}));
    sub->add_option("--workers", workers, "worker threads (overrides ADAPTKIT_WORKERS)")->check(CLI::PositiveNumber);
    sub->add_option("--seeds", seeds, "repeat adapt/sweep over N consecutive seeds and report means")
        ->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg = load_config(config_path);
    Overrides o;
    o.out = out_dir;
    o.seed = seed;
    if (span) o.span = eval::score_span_from_string(*span);
    o.workers = workers;
    o.seeds = seeds;
    apply_overrides(cfg, o);
    for (const auto& [name, desc] : commands)
      if (app.got_subcommand(name)) return desc.second(cfg, o, out, err);
    return 2;
  } catch (const ValidationError& e) {
    err << "error: invalid " << e.field() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace adaptkit::cli
