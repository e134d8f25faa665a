#pragma once

#include <cstddef>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "metaalign/data.hpp"
#include "metaalign/nn.hpp"
#include "metaalign/tensor.hpp"

namespace metaalign::analysis {

struct GradDot {
  /// Sum of the per-group dots, in group order.
  double total = 0.0;
  /// Empty when either gradient norm is below 1e-15.
  std::optional<double> cosine;
  std::vector<double> per_group;
};

/// Flattened inner product of two gradient maps, per group and overall. Each
/// group's dot is one sequential accumulation over its parameters in order.
GradDot grad_dot(const GradientMap& a, const GradientMap& b,
                 const std::vector<std::vector<ParamId>>& groups);

/// Argmax-of-logits accuracy over the dataset's labels; ties go to the lowest class.
double evaluate(const nn::ModelBundle& model, const data::Dataset& dataset);

/// Argmax accuracy for precomputed logits.
double accuracy_from_logits(const Tensor& logits, std::span<const int> labels);

/// One JSONL line per training iteration.
///
/// grad_* fields compare the two tasks' gradients over the shared extractor
/// parameters. Joint runs evaluate both at the current parameters. MetaAlign
/// runs compare the meta-train gradient at the current parameters with the
/// meta-test gradient at the virtually updated parameters, which are the
/// quantities the group-weight gradient uses.
struct MetricsRecord {
  std::size_t iteration = 0;
  double L_cls = 0.0;
  std::optional<double> L_dom_cls;
  double L_dom = 0.0;
  double L_beta = 0.0;
  double L_total = 0.0;
  double grad_dot_total = 0.0;
  std::optional<double> grad_cos;
  std::vector<double> grad_dot_per_group;
  std::vector<double> beta;
  std::optional<double> source_acc;
  std::optional<double> target_acc;
  std::optional<double> wallclock_ms;
  /// A discriminator output hit the log clamp this step. Serialized only when set.
  bool clamped = false;

  bool operator==(const MetricsRecord&) const = default;
};

nlohmann::json to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const nlohmann::json& j);

/// Append-only JSONL stream, flushed after every record.
class MetricsSink {
 public:
  /// Truncates and opens the file.
  explicit MetricsSink(const std::string& path);
  /// Writes to a caller-owned stream.
  explicit MetricsSink(std::ostream& out);

  void write(const MetricsRecord& record);

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* out_;
  std::string path_;
};

void record_metrics(MetricsSink& sink, const MetricsRecord& record);

std::vector<MetricsRecord> read_metrics(const std::string& path);

}  // namespace metaalign::analysis
