#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "metaalign/losses.hpp"
#include "metaalign/nn.hpp"
#include "metaalign/optim.hpp"

namespace metaalign::config {

/// Schema violation; field is the dotted path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct DatasetSpec {
  /// two_moons | gaussian_shift | csv
  std::string generator = "two_moons";
  std::size_t n_per_domain = 1000;
  double noise = 0.15;
  double rotation_deg = 45.0;
  std::array<double, 2> translation{0.0, 0.0};
  std::size_t num_classes = 3;
  std::size_t dim = 2;
  double class_sep = 3.0;
  double mean_shift = 1.0;
  std::string source_csv;
  std::string target_csv;
  /// Generator seed; the run seed when absent.
  std::optional<std::uint64_t> seed;
  /// Fit a standardizer on the source and apply it to both domains.
  bool standardize = true;
};

enum class Strategy { joint, metaalign };

struct OutputSpec {
  std::string dir = "out";
  std::string metrics = "metrics.jsonl";
  std::string summary = "summary.json";
  std::string checkpoint = "model.ckpt";
};

struct TrainConfig {
  DatasetSpec dataset;
  std::vector<std::size_t> hidden{64, 64};
  std::optional<std::size_t> groups;
  std::vector<std::size_t> classifier_hidden;
  std::size_t discriminator_hidden = 32;
  nn::Activation activation = nn::Activation::relu;
  double dropout = 0.0;
  losses::AlignmentVariant variant;
  /// MMD bandwidth; median heuristic on the first batch when absent.
  std::optional<double> sigma;
  optim::OptimConfig optimizer;
  std::optional<double> budget;
  Strategy strategy = Strategy::metaalign;
  optim::RolePolicy role_policy = optim::RolePolicy::alternate;
  bool allow_zero_alpha = false;
  std::size_t iterations = 2000;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  std::size_t eval_every = 50;
  bool record_wallclock = false;
  OutputSpec output;
  std::vector<std::string> presets;
  /// The parsed document, for hashing and provenance.
  nlohmann::json document;
};

/// Parses and validates a config document. Unknown keys are rejected.
TrainConfig parse_config(const nlohmann::json& doc);
TrainConfig load_config(const std::string& path);

/// 16 hex digits of FNV-1a over the key-sorted compact serialization.
std::string config_hash(const nlohmann::json& doc);

/// Model architecture implied by the config for data of the given width and class count.
nn::ModelSpec model_spec(const TrainConfig& cfg, std::size_t input_dim, std::size_t num_classes);

std::string to_string(Strategy s);

/// Output directory after applying the METAALIGN_OUTPUT_DIR override.
std::string output_dir(const TrainConfig& cfg);

}  // namespace metaalign::config
