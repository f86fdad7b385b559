// Copyright 2026 The flowrl-lab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// flowrl: command-line front end.
//
//   flowrl run <config> [--out DIR] [--force]
//   flowrl sweep <config> --out DIR [--force]
//   flowrl export-plots <run-dir>
//   flowrl check [--seed N]
//
// Exit codes: 0 success, 1 other failure (or a failed self-check),
// 2 config/usage error, 3 numeric failure, 4 partial sweep failure.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "flowrl/experiment.hpp"
#include "flowrl/selfcheck.hpp"

namespace {

int print_checks(std::uint64_t seed) {
  const auto results = flowrl::run_self_checks(seed);
  bool all = true;
  std::printf("%-30s %9s %14s %10s  %s\n", "check", "instances", "worst", "tolerance", "result");
  for (const auto& r : results) {
    std::printf("%-30s %9d %14.3e %10.1e  %s\n", r.name.c_str(), r.instances, r.worst,
                r.tolerance, r.passed ? "PASS" : "FAIL");
    all = all && r.passed;
  }
  std::printf("%s\n", all ? "all checks passed" : "some checks FAILED");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowrl: desk-scale reward-distribution-matching RL lab"};
  app.require_subcommand(1);

  std::string config;
  std::string out;
  bool force = false;
  auto* run = app.add_subcommand("run", "train one configuration");
  run->add_option("config", config, "JSON config file")->required();
  run->add_option("--out", out, "output directory (default runs/<config name>)");
  run->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* sweep = app.add_subcommand("sweep", "run every (value, seed) cell of a sweep");
  sweep->add_option("config", config, "JSON config file with a sweep section")->required();
  sweep->add_option("--out", out, "output directory")->required();
  sweep->add_flag("--force", force, "overwrite a non-empty output directory");

  std::string run_dir;
  auto* plots = app.add_subcommand("export-plots", "write plot-ready CSVs under <run-dir>/plots");
  plots->add_option("run-dir", run_dir, "run or sweep directory")->required();

  std::uint64_t seed = 2026;
  auto* check = app.add_subcommand("check", "gradient, Prop. 1 and Prop. 2 self-checks");
  check->add_option("--seed", seed, "seed for the random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) {
      const auto spec = flowrl::parse_config(config);
      if (out.empty()) out = (flowrl::fs::path("runs") / flowrl::fs::path(config).stem()).string();
      const auto r = flowrl::run_experiment(spec, out, force);
      if (r.exit_code != 0) {
        std::cerr << "run failed: " << r.message << '\n';
        return r.exit_code;
      }
      const auto& m = *r.final_metrics;
      std::cout << "wrote " << out << "\nfinal step " << m.step << ": kl_to_target "
                << m.kl_to_target << ", mode_coverage " << m.mode_coverage << ", entropy "
                << m.entropy << '\n';
      return 0;
    }
    if (*sweep) {
      const auto spec = flowrl::parse_config(config);
      const auto r = flowrl::run_sweep(spec, out, force, flowrl::run_threads_from_env());
      std::cout << "wrote " << r.cells.size() << " cells and aggregate.csv under " << out << '\n';
      if (r.exit_code != 0) std::cerr << "failed cells:\n" << r.failure_table;
      return r.exit_code;
    }
    if (*plots) {
      for (const auto& f : flowrl::export_plots(run_dir)) std::cout << "wrote " << f.string() << '\n';
      return 0;
    }
    if (*check) return print_checks(seed);
  } catch (const flowrl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const flowrl::OutputExists& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const flowrl::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
