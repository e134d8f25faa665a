#include "metaalign/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "metaalign/errors.hpp"

namespace metaalign::config {

namespace {

using nlohmann::json;

/// Walks one JSON object, remembering which keys were read so leftovers can
/// be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* get(const std::string& key) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return nullptr;
    return &*it;
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = get(key);
    if (!v) return;
    try {
      out = convert<T>(*v, key);
    } catch (const json::exception& e) {
      throw ConfigError(field(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  template <typename T>
  void read_optional(const std::string& key, std::optional<T>& out) {
    const json* v = get(key);
    if (!v) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    try {
      out = convert<T>(*v, key);
    } catch (const json::exception& e) {
      throw ConfigError(field(key), std::string("wrong type (") + e.what() + ")");
    }
  }

  ObjectReader child(const std::string& key) {
    const json* v = get(key);
    static const json empty = json::object();
    return ObjectReader(v ? *v : empty, field(key));
  }

  void finish() const {
    for (const auto& [key, _] : obj_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key), "unknown key");
    }
  }

 private:
  template <typename T>
  T convert(const json& v, const std::string& key) const {
    if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(field(key), "expected a number");
    } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
      if (!v.is_number_integer()) throw ConfigError(field(key), "expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0) {
          throw ConfigError(field(key), "must be nonnegative");
        }
      }
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field(key), "expected true or false");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field(key), "expected a string");
    }
    return v.get<T>();
  }

  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& message) {
  if (!ok) throw ConfigError(field, message);
}

}  // namespace

std::string to_string(Strategy s) { return s == Strategy::joint ? "joint" : "metaalign"; }

TrainConfig parse_config(const nlohmann::json& doc) {
  TrainConfig cfg;
  cfg.document = doc;
  ObjectReader root(doc, "");

  root.read("presets", cfg.presets);
  for (const auto& p : cfg.presets) {
    check(p == "paper_alpha_ratio" || p == "paper_groups", "presets",
          "unknown preset '" + p + "' (expected paper_alpha_ratio or paper_groups)");
  }
  auto has_preset = [&](const std::string& p) {
    return std::find(cfg.presets.begin(), cfg.presets.end(), p) != cfg.presets.end();
  };

  {
    auto d = root.child("dataset");
    auto& ds = cfg.dataset;
    d.read("generator", ds.generator);
    check(ds.generator == "two_moons" || ds.generator == "gaussian_shift" || ds.generator == "csv",
          d.field("generator"), "expected two_moons, gaussian_shift or csv");
    d.read("n_per_domain", ds.n_per_domain);
    d.read("noise", ds.noise);
    d.read("rotation_deg", ds.rotation_deg);
    if (const json* t = d.get("translation")) {
      check(t->is_array() && t->size() == 2 && (*t)[0].is_number() && (*t)[1].is_number(),
            d.field("translation"), "expected [dx, dy]");
      ds.translation = {(*t)[0].get<double>(), (*t)[1].get<double>()};
    }
    d.read("num_classes", ds.num_classes);
    d.read("dim", ds.dim);
    d.read("class_sep", ds.class_sep);
    d.read("mean_shift", ds.mean_shift);
    d.read("source_csv", ds.source_csv);
    d.read("target_csv", ds.target_csv);
    d.read_optional("seed", ds.seed);
    d.read("standardize", ds.standardize);
    d.finish();
    if (ds.generator == "two_moons") {
      check(ds.n_per_domain >= 2, d.field("n_per_domain"), "must be at least 2");
      check(ds.noise >= 0.0, d.field("noise"), "must be nonnegative");
    } else if (ds.generator == "gaussian_shift") {
      check(ds.n_per_domain >= 1, d.field("n_per_domain"), "must be positive");
      check(ds.num_classes >= 2, d.field("num_classes"), "must be at least 2");
      check(ds.dim >= 1, d.field("dim"), "must be positive");
    } else {
      check(!ds.source_csv.empty(), d.field("source_csv"), "required for the csv generator");
      check(!ds.target_csv.empty(), d.field("target_csv"), "required for the csv generator");
    }
  }

  {
    auto m = root.child("model");
    m.read("hidden", cfg.hidden);
    m.read_optional("groups", cfg.groups);
    m.read("classifier_hidden", cfg.classifier_hidden);
    m.read("discriminator_hidden", cfg.discriminator_hidden);
    std::string act = nn::to_string(cfg.activation);
    m.read("activation", act);
    check(act == "relu" || act == "tanh", m.field("activation"), "expected relu or tanh");
    cfg.activation = nn::parse_activation(act);
    m.read("dropout", cfg.dropout);
    m.finish();
    for (auto h : cfg.hidden) check(h > 0, m.field("hidden"), "widths must be positive");
    for (auto h : cfg.classifier_hidden) check(h > 0, m.field("classifier_hidden"), "widths must be positive");
    check(cfg.discriminator_hidden > 0, m.field("discriminator_hidden"), "must be positive");
    check(cfg.dropout >= 0.0 && cfg.dropout < 1.0, m.field("dropout"), "must lie in [0, 1)");
    if (has_preset("paper_groups")) {
      check(!cfg.groups || *cfg.groups == 4, m.field("groups"), "conflicts with preset paper_groups");
      cfg.groups = 4;
    }
    if (cfg.groups) {
      check(*cfg.groups >= 1 && *cfg.groups <= cfg.hidden.size(), m.field("groups"),
            "must lie in [1, number of extractor layers = " + std::to_string(cfg.hidden.size()) + "]");
    }
  }

  {
    auto a = root.child("alignment");
    std::string variant = losses::to_string(cfg.variant.kind);
    a.read("variant", variant);
    check(variant == "DANN" || variant == "DANNPE" || variant == "MMD", a.field("variant"),
          "expected DANN, DANNPE or MMD");
    cfg.variant.kind = losses::parse_alignment_kind(variant);
    a.read("lambda", cfg.variant.lambda);
    a.read_optional("sigma", cfg.sigma);
    a.finish();
    check(std::isfinite(cfg.variant.lambda) && cfg.variant.lambda >= 0.0, a.field("lambda"),
          "must be finite and nonnegative");
    if (cfg.sigma) check(*cfg.sigma > 0.0, a.field("sigma"), "must be positive");
  }

  {
    auto o = root.child("optimizer");
    auto& op = cfg.optimizer;
    o.read("lr", op.lr);
    const bool alpha_given = o.has("alpha");
    o.read("alpha", op.alpha);
    o.read("momentum", op.momentum);
    o.read("weight_decay", op.weight_decay);
    o.read_optional("budget", cfg.budget);
    o.finish();
    check(op.lr > 0.0, o.field("lr"), "must be positive");
    check(op.momentum >= 0.0 && op.momentum < 1.0, o.field("momentum"), "must lie in [0, 1)");
    check(op.weight_decay >= 0.0, o.field("weight_decay"), "must be nonnegative");
    if (has_preset("paper_alpha_ratio")) {
      check(!alpha_given, o.field("alpha"), "conflicts with preset paper_alpha_ratio");
      op.alpha = 10.0 * op.lr;
    }
    check(op.alpha >= 0.0, o.field("alpha"), "must be nonnegative");
    if (cfg.budget) check(*cfg.budget > 0.0, o.field("budget"), "must be positive");
  }

  {
    auto s = root.child("strategy");
    std::string kind = to_string(cfg.strategy);
    s.read("kind", kind);
    check(kind == "joint" || kind == "metaalign", s.field("kind"), "expected joint or metaalign");
    cfg.strategy = kind == "joint" ? Strategy::joint : Strategy::metaalign;
    std::string policy = optim::to_string(cfg.role_policy);
    s.read("role_policy", policy);
    check(policy == "align_train" || policy == "cls_train" || policy == "alternate",
          s.field("role_policy"), "expected align_train, cls_train or alternate");
    cfg.role_policy = optim::parse_role_policy(policy);
    s.read("allow_zero_alpha", cfg.allow_zero_alpha);
    s.finish();
    if (cfg.strategy == Strategy::metaalign) {
      check(cfg.optimizer.alpha > 0.0 || cfg.allow_zero_alpha, "optimizer.alpha",
            "metaalign requires alpha > 0 (set strategy.allow_zero_alpha to override)");
      check(!cfg.hidden.empty(), "model.hidden", "metaalign needs at least one extractor layer");
    }
  }

  root.read("iterations", cfg.iterations);
  check(cfg.iterations >= 1, "iterations", "must be at least 1");
  root.read("batch_size", cfg.batch_size);
  check(cfg.batch_size >= 1, "batch_size", "must be at least 1");
  root.read("seed", cfg.seed);
  root.read("eval_every", cfg.eval_every);
  check(cfg.eval_every >= 1, "eval_every", "must be at least 1");
  root.read("record_wallclock", cfg.record_wallclock);

  {
    auto o = root.child("output");
    o.read("dir", cfg.output.dir);
    o.read("metrics", cfg.output.metrics);
    o.read("summary", cfg.output.summary);
    o.read("checkpoint", cfg.output.checkpoint);
    o.finish();
  }
  root.finish();
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot open config " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<file>", std::string("invalid JSON in ") + path + ": " + e.what());
  }
  return parse_config(doc);
}

std::string config_hash(const nlohmann::json& doc) {
  // nlohmann::json objects keep keys sorted, so dump() is canonical.
  const std::string text = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

nn::ModelSpec model_spec(const TrainConfig& cfg, std::size_t input_dim, std::size_t num_classes) {
  nn::ModelSpec spec;
  spec.input_dim = input_dim;
  spec.hidden = cfg.hidden;
  spec.groups = cfg.groups;
  spec.classifier_hidden = cfg.classifier_hidden;
  spec.num_classes = num_classes;
  switch (cfg.variant.kind) {
    case losses::AlignmentKind::dann: spec.discriminator_input = nn::DiscriminatorInput::features; break;
    case losses::AlignmentKind::dannpe:
      spec.discriminator_input = nn::DiscriminatorInput::probabilities;
      break;
    case losses::AlignmentKind::mmd: spec.discriminator_input = nn::DiscriminatorInput::none; break;
  }
  spec.discriminator_hidden = cfg.discriminator_hidden;
  spec.dropout = cfg.dropout;
  spec.activation = cfg.activation;
  spec.budget = cfg.budget;
  return spec;
}

std::string output_dir(const TrainConfig& cfg) {
  if (const char* env = std::getenv("METAALIGN_OUTPUT_DIR"); env && *env) return env;
  return cfg.output.dir;
}

}  // namespace metaalign::config
