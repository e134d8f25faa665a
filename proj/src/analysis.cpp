#include "metaalign/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "metaalign/errors.hpp"

namespace metaalign::analysis {

GradDot grad_dot(const GradientMap& a, const GradientMap& b,
                 const std::vector<std::vector<ParamId>>& groups) {
  GradDot out;
  double norm_a = 0.0, norm_b = 0.0;
  for (const auto& group : groups) {
    double dot = 0.0;
    for (const auto& id : group) {
      const auto ia = a.find(id);
      const auto ib = b.find(id);
      if (ia == a.end() || ib == b.end()) {
        throw ContractError("grad_dot: gradient for " + id.name + " missing from one side");
      }
      const auto av = ia->second.values();
      const auto bv = ib->second.values();
      if (av.size() != bv.size()) {
        throw DimensionError("grad_dot: gradient sizes differ for " + id.name);
      }
      for (std::size_t i = 0; i < av.size(); ++i) {
        dot += av[i] * bv[i];
        norm_a += av[i] * av[i];
        norm_b += bv[i] * bv[i];
      }
    }
    out.per_group.push_back(dot);
  }
  for (double d : out.per_group) out.total += d;
  norm_a = std::sqrt(norm_a);
  norm_b = std::sqrt(norm_b);
  if (norm_a >= 1e-15 && norm_b >= 1e-15) {
    out.cosine = std::clamp(out.total / (norm_a * norm_b), -1.0, 1.0);
  }
  return out;
}

double accuracy_from_logits(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.rows(), k = logits.cols();
  if (labels.size() != n) throw DimensionError("accuracy: label count does not match logits");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    }
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double evaluate(const nn::ModelBundle& model, const data::Dataset& dataset) {
  const Tensor features = nn::extract_features(model.extractor, model.params, dataset.features);
  return accuracy_from_logits(nn::classify(model.classifier, model.params, features),
                              dataset.labels);
}

namespace {

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  return v.get<double>();
}

}  // namespace

nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json out = nlohmann::json::object();
  out["iteration"] = r.iteration;
  out["L_cls"] = r.L_cls;
  out["L_dom_cls"] = opt(r.L_dom_cls);
  out["L_dom"] = r.L_dom;
  out["L_beta"] = r.L_beta;
  out["L_total"] = r.L_total;
  out["grad_dot_total"] = r.grad_dot_total;
  out["grad_cos"] = opt(r.grad_cos);
  out["grad_dot_per_group"] = r.grad_dot_per_group;
  out["beta"] = r.beta;
  out["source_acc"] = opt(r.source_acc);
  out["target_acc"] = opt(r.target_acc);
  out["wallclock_ms"] = opt(r.wallclock_ms);
  if (r.clamped) out["clamped"] = true;
  return out;
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.iteration = j.at("iteration").get<std::size_t>();
  r.L_cls = j.at("L_cls").get<double>();
  r.L_dom_cls = opt_from(j, "L_dom_cls");
  r.L_dom = j.at("L_dom").get<double>();
  r.L_beta = j.at("L_beta").get<double>();
  r.L_total = j.at("L_total").get<double>();
  r.grad_dot_total = j.at("grad_dot_total").get<double>();
  r.grad_cos = opt_from(j, "grad_cos");
  r.grad_dot_per_group = j.at("grad_dot_per_group").get<std::vector<double>>();
  r.beta = j.at("beta").get<std::vector<double>>();
  r.source_acc = opt_from(j, "source_acc");
  r.target_acc = opt_from(j, "target_acc");
  r.wallclock_ms = opt_from(j, "wallclock_ms");
  r.clamped = j.value("clamped", false);
  return r;
}

MetricsSink::MetricsSink(const std::string& path)
    : file_(std::make_unique<std::ofstream>(path, std::ios::out | std::ios::trunc)),
      out_(file_.get()),
      path_(path) {
  if (!*file_) throw IoError("cannot open metrics stream: " + path);
}

MetricsSink::MetricsSink(std::ostream& out) : out_(&out), path_("<stream>") {}

void MetricsSink::write(const MetricsRecord& record) {
  *out_ << to_json(record).dump() << '\n';
  out_->flush();
  if (!*out_) throw IoError("failed writing metrics to " + path_);
}

void record_metrics(MetricsSink& sink, const MetricsRecord& record) { sink.write(record); }

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics stream: " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(metrics_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

}  // namespace metaalign::analysis
