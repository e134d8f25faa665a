#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "metaalign/analysis.hpp"
#include "metaalign/config.hpp"
#include "metaalign/data.hpp"
#include "metaalign/nn.hpp"

namespace metaalign::runner {

/// Generates or loads both domains; standardizes with source statistics when asked.
data::DomainPair prepare_data(const config::TrainConfig& cfg);

/// Model for the config's data, initialized deterministically from the run seed.
nn::ModelBundle make_model(const config::TrainConfig& cfg, const data::DomainPair& data);

struct RunSummary {
  std::string config_hash;
  std::optional<double> final_target_acc;
  std::optional<double> mean_grad_cos;
  std::size_t steps = 0;
  bool aborted = false;
  /// Reason for an abort.
  std::optional<std::string> error;
};

nlohmann::json to_json(const RunSummary& s);
RunSummary summary_from_json(const nlohmann::json& j);

struct TrainResult {
  nn::ModelBundle model;
  RunSummary summary;
};

/// Runs the configured loop on prepared data, writing one record per
/// iteration to sink (when given). A non-finite loss or gradient stops the
/// loop and marks the summary aborted instead of throwing.
TrainResult train(const config::TrainConfig& cfg, const data::DomainPair& data,
                  analysis::MetricsSink* sink);

/// Full run into out_dir: metrics stream, summary JSON and, unless aborted,
/// a checkpoint. Returns the summary.
RunSummary run(const config::TrainConfig& cfg, const std::string& out_dir);

struct SweepEntry {
  std::uint64_t seed = 0;
  RunSummary summary;
};

struct Stat {
  double mean = 0.0;
  double std = 0.0;
  std::size_t count = 0;
};

/// Mean and population standard deviation; empty input gives count 0.
Stat mean_std(const std::vector<double>& values);

struct SweepResult {
  std::vector<SweepEntry> entries;
  Stat final_target_acc;
  Stat mean_grad_cos;
  bool any_aborted = false;
};

/// Aggregates over the entries that completed.
SweepResult aggregate(std::vector<SweepEntry> entries);
nlohmann::json to_json(const SweepResult& r);

/// One independent run per seed under out_dir/seed_<s>, then aggregate.json.
/// Runs use up to `jobs` threads; each owns all of its state.
SweepResult sweep(const config::TrainConfig& cfg, const std::vector<std::uint64_t>& seeds,
                  const std::string& out_dir, std::size_t jobs = 1);

struct EvalResult {
  double source_acc = 0.0;
  double target_acc = 0.0;
};

/// Accuracy of a stored checkpoint on the config's data.
EvalResult eval_checkpoint(const std::string& checkpoint_path, const config::TrainConfig& cfg);

}  // namespace metaalign::runner
