// Command-line driver: run, gradcheck, sweep, eval.
#include <charconv>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "metaalign/config.hpp"
#include "metaalign/errors.hpp"
#include "metaalign/gradcheck.hpp"
#include "metaalign/runner.hpp"

namespace {

using namespace metaalign;

enum Exit : int { kOk = 0, kConfig = 2, kRuntime = 3, kCheck = 4 };

int report_error(const std::string& kind, const std::string& message, int code,
                 const std::string& field = "") {
  nlohmann::json j = {{"error", kind}, {"message", message}, {"exit_code", code}};
  if (!field.empty()) j["field"] = field;
  std::cerr << j.dump() << '\n';
  return code;
}

/// Maps library exceptions onto exit codes and a JSON line on stderr.
template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const config::ConfigError& e) {
    return report_error("config", e.what(), kConfig, e.field());
  } catch (const NonFiniteError& e) {
    return report_error("non_finite", e.what(), kRuntime);
  } catch (const DataError& e) {
    return report_error("data", e.what(), kRuntime);
  } catch (const IoError& e) {
    return report_error("io", e.what(), kRuntime);
  } catch (const std::exception& e) {
    return report_error("runtime", e.what(), kRuntime);
  }
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = std::min(text.find(',', pos), text.size());
    const std::string item = text.substr(pos, comma - pos);
    std::uint64_t v = 0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (item.empty() || ec != std::errc() || end != item.data() + item.size()) {
      throw config::ConfigError("--seeds", "expected comma-separated unsigned integers, got '" +
                                               text + "'");
    }
    seeds.push_back(v);
    pos = comma + 1;
  }
  return seeds;
}

int cmd_run(const std::string& path) {
  return guarded([&] {
    const auto cfg = config::load_config(path);
    const auto summary = runner::run(cfg, config::output_dir(cfg));
    std::cout << runner::to_json(summary).dump(2) << '\n';
    if (summary.aborted) {
      return report_error("non_finite", summary.error.value_or("aborted"), kRuntime);
    }
    return int{kOk};
  });
}

int cmd_gradcheck(std::uint64_t seed, const std::string& corrupt_op) {
  return guarded([&] {
    std::optional<testing::ScopedBackwardFault> fault;
    if (!corrupt_op.empty()) {
      const auto kind = gradcheck::parse_op_kind(corrupt_op);
      if (!kind) throw config::ConfigError("--corrupt-op", "unknown op '" + corrupt_op + "'");
      fault.emplace(*kind, 1.5);
    }
    const auto report = gradcheck::run_suite(seed);
    std::cout << gradcheck::format_report(report);
    if (!report.passed()) {
      nlohmann::json j = {{"error", "gradcheck"},
                          {"message", "gradient check failed"},
                          {"failing", report.failures()},
                          {"exit_code", int{kCheck}}};
      std::cerr << j.dump() << '\n';
      return int{kCheck};
    }
    return int{kOk};
  });
}

int cmd_sweep(const std::string& path, const std::string& seeds_text, std::size_t jobs) {
  return guarded([&] {
    const auto seeds = parse_seeds(seeds_text);
    const auto cfg = config::load_config(path);
    const auto result = runner::sweep(cfg, seeds, config::output_dir(cfg), jobs);
    std::cout << runner::to_json(result).dump(2) << '\n';
    if (result.any_aborted) {
      return report_error("aborted", "one or more seeds aborted", kRuntime);
    }
    return int{kOk};
  });
}

int cmd_eval(const std::string& ckpt, const std::string& path) {
  return guarded([&] {
    const auto cfg = config::load_config(path);
    const auto r = runner::eval_checkpoint(ckpt, cfg);
    std::cout << nlohmann::json{{"source_acc", r.source_acc}, {"target_acc", r.target_acc}}.dump()
              << '\n';
    return int{kOk};
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-optimized domain alignment: training, gradient checks, sweeps"};
  app.require_subcommand(1);

  std::string config_path, ckpt_path, seeds_text, corrupt_op;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;

  auto* run = app.add_subcommand("run", "Train one configuration");
  run->add_option("config", config_path, "JSON config")->required();

  auto* check = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  check->add_option("--seed", seed, "Suite seed");
  check->add_option("--corrupt-op", corrupt_op, "Scale one op's backward (negative control)");

  auto* sw = app.add_subcommand("sweep", "Train one configuration over several seeds");
  sw->add_option("config", config_path, "JSON config")->required();
  sw->add_option("--seeds", seeds_text, "Comma-separated seeds")->required();
  sw->add_option("--jobs", jobs, "Concurrent runs")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Accuracy of a saved checkpoint");
  ev->add_option("checkpoint", ckpt_path, "Checkpoint file")->required();
  ev->add_option("config", config_path, "JSON config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), kConfig);
  }

  if (*run) return cmd_run(config_path);
  if (*check) return cmd_gradcheck(seed, corrupt_op);
  if (*sw) return cmd_sweep(config_path, seeds_text, jobs);
  return cmd_eval(ckpt_path, config_path);
}
