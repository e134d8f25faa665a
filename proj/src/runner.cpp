#include "metaalign/runner.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "metaalign/checkpoint.hpp"
#include "metaalign/errors.hpp"
#include "metaalign/losses.hpp"
#include "metaalign/optim.hpp"
#include "metaalign/rng.hpp"

namespace metaalign::runner {

namespace fs = std::filesystem;
using config::Strategy;
using config::TrainConfig;

// Stream ids for derive_seed; distinct from the ones used inside data generation.
constexpr std::uint64_t kInitStream = 100;
constexpr std::uint64_t kBatchStream = 200;
constexpr std::uint64_t kDropoutStream = 300;

data::DomainPair prepare_data(const TrainConfig& cfg) {
  const auto& ds = cfg.dataset;
  const std::uint64_t seed = ds.seed.value_or(cfg.seed);
  data::DomainPair pair;
  if (ds.generator == "two_moons") {
    pair = data::gen_two_moons(ds.n_per_domain, ds.noise, ds.rotation_deg, ds.translation, seed);
  } else if (ds.generator == "gaussian_shift") {
    pair = data::gen_gaussian_shift(ds.n_per_domain, ds.num_classes, ds.dim, ds.class_sep,
                                    ds.mean_shift, seed);
  } else {
    pair.source = data::load_csv(ds.source_csv);
    pair.target = data::load_csv(ds.target_csv);
    if (pair.source.domain != data::Domain::source) {
      throw DataError(ds.source_csv + ": rows are not in the source domain");
    }
    if (pair.target.domain != data::Domain::target) {
      throw DataError(ds.target_csv + ": rows are not in the target domain");
    }
    if (pair.source.dim() != pair.target.dim()) {
      throw DataError("source and target CSVs have different feature counts (" +
                      std::to_string(pair.source.dim()) + " vs " +
                      std::to_string(pair.target.dim()) + ")");
    }
    const auto k = std::max(pair.source.num_classes, pair.target.num_classes);
    pair.source.num_classes = pair.target.num_classes = k;
  }
  if (ds.standardize) {
    const auto st = data::Standardizer::fit(pair.source);
    pair.source = st.apply(pair.source);
    pair.target = st.apply(pair.target);
  }
  return pair;
}

nn::ModelBundle make_model(const TrainConfig& cfg, const data::DomainPair& data) {
  auto model = nn::build_model(config::model_spec(cfg, data.source.dim(), data.source.num_classes));
  nn::init_params(model, derive_seed(cfg.seed, kInitStream));
  return model;
}

namespace {

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

nlohmann::json to_json(const RunSummary& s) {
  nlohmann::json j = nlohmann::json::object();
  j["config_hash"] = s.config_hash;
  j["final_target_acc"] = opt(s.final_target_acc);
  j["mean_grad_cos"] = opt(s.mean_grad_cos);
  j["steps"] = s.steps;
  j["aborted"] = s.aborted;
  if (s.error) j["error"] = *s.error;
  return j;
}

RunSummary summary_from_json(const nlohmann::json& j) {
  RunSummary s;
  s.config_hash = j.at("config_hash").get<std::string>();
  s.final_target_acc = opt_from(j, "final_target_acc");
  s.mean_grad_cos = opt_from(j, "mean_grad_cos");
  s.steps = j.at("steps").get<std::size_t>();
  s.aborted = j.at("aborted").get<bool>();
  if (j.contains("error")) s.error = j.at("error").get<std::string>();
  return s;
}

TrainResult train(const TrainConfig& cfg, const data::DomainPair& data,
                  analysis::MetricsSink* sink) {
  TrainResult result{make_model(cfg, data), {}};
  auto& model = result.model;
  auto& summary = result.summary;
  summary.config_hash = config::config_hash(cfg.document);

  data::BatchStream stream(data.source, data.target, cfg.batch_size,
                           derive_seed(cfg.seed, kBatchStream));
  Rng dropout_rng(derive_seed(cfg.seed, kDropoutStream));
  optim::OptimState state(cfg.optimizer);
  if (model.beta.count > 0) state.no_decay.insert(model.beta.id);

  losses::AlignmentVariant variant = cfg.variant;
  std::optional<data::PairedBatch> batch = stream.next();
  if (variant.kind == losses::AlignmentKind::mmd) {
    if (cfg.sigma) {
      variant.sigma = *cfg.sigma;
    } else {
      variant.sigma = losses::median_sq_distance(
          nn::extract_features(model.extractor, model.params, batch->src_features),
          nn::extract_features(model.extractor, model.params, batch->tgt_features));
    }
  }
  losses::validate(variant);

  const auto start = std::chrono::steady_clock::now();
  double cos_sum = 0.0;
  std::size_t cos_count = 0;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    if (it > 0) batch = stream.next();
    const optim::StepContext ctx{it, &dropout_rng};
    optim::StepReport r;
    try {
      if (cfg.strategy == Strategy::joint) {
        r = optim::joint_step(model, *batch, variant, state, ctx);
      } else {
        r = optim::metaalign_step(model, *batch, variant, state,
                                  optim::role_schedule(cfg.role_policy, it), ctx);
      }
    } catch (const NonFiniteError& e) {
      summary.aborted = true;
      summary.error = e.what();
      break;
    }

    analysis::MetricsRecord rec;
    rec.iteration = it;
    rec.L_cls = r.L_cls;
    rec.L_dom_cls = r.L_dom_cls;
    rec.L_dom = r.L_dom;
    rec.L_beta = r.L_beta;
    rec.L_total = r.L_total;
    rec.grad_dot_total = r.grad_dot_total;
    rec.grad_cos = r.grad_cos;
    rec.grad_dot_per_group = r.grad_dot_per_group;
    rec.beta = r.beta;
    rec.clamped = r.clamped;
    if ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.iterations) {
      rec.source_acc = analysis::evaluate(model, data.source);
      rec.target_acc = analysis::evaluate(model, data.target);
      summary.final_target_acc = rec.target_acc;
    }
    if (cfg.record_wallclock) {
      rec.wallclock_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
              .count();
    }
    if (r.grad_cos) {
      cos_sum += *r.grad_cos;
      ++cos_count;
    }
    if (sink) sink->write(rec);
    summary.steps = it + 1;
  }
  if (cos_count > 0) summary.mean_grad_cos = cos_sum / static_cast<double>(cos_count);
  return result;
}

RunSummary run(const TrainConfig& cfg, const std::string& out_dir) {
  const fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());
  const auto data = prepare_data(cfg);
  analysis::MetricsSink sink((dir / cfg.output.metrics).string());
  auto result = train(cfg, data, &sink);
  write_json(dir / cfg.output.summary, to_json(result.summary));
  if (!result.summary.aborted) {
    checkpoint::save((dir / cfg.output.checkpoint).string(), result.model.params);
  }
  return result.summary;
}

Stat mean_std(const std::vector<double>& values) {
  Stat s;
  s.count = values.size();
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / static_cast<double>(values.size()));
  return s;
}

SweepResult aggregate(std::vector<SweepEntry> entries) {
  SweepResult r;
  std::vector<double> acc, cos;
  for (const auto& e : entries) {
    if (e.summary.aborted) {
      r.any_aborted = true;
      continue;
    }
    if (e.summary.final_target_acc) acc.push_back(*e.summary.final_target_acc);
    if (e.summary.mean_grad_cos) cos.push_back(*e.summary.mean_grad_cos);
  }
  r.final_target_acc = mean_std(acc);
  r.mean_grad_cos = mean_std(cos);
  r.entries = std::move(entries);
  return r;
}

nlohmann::json to_json(const SweepResult& r) {
  auto stat = [](const Stat& s) {
    nlohmann::json j = nlohmann::json::object();
    j["mean"] = s.count ? nlohmann::json(s.mean) : nlohmann::json(nullptr);
    j["std"] = s.count ? nlohmann::json(s.std) : nlohmann::json(nullptr);
    j["count"] = s.count;
    return j;
  };
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : r.entries) {
    auto j = to_json(e.summary);
    j["seed"] = e.seed;
    entries.push_back(std::move(j));
  }
  nlohmann::json out = nlohmann::json::object();
  out["entries"] = std::move(entries);
  out["final_target_acc"] = stat(r.final_target_acc);
  out["mean_grad_cos"] = stat(r.mean_grad_cos);
  out["any_aborted"] = r.any_aborted;
  return out;
}

SweepResult sweep(const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds,
                  const std::string& out_dir, std::size_t jobs) {
  if (seeds.empty()) throw ContractError("sweep: at least one seed is required");
  std::vector<SweepEntry> entries(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      TrainConfig run_cfg = cfg;
      run_cfg.seed = seeds[i];
      run_cfg.document["seed"] = seeds[i];
      entries[i].seed = seeds[i];
      const std::string dir = (fs::path(out_dir) / ("seed_" + std::to_string(seeds[i]))).string();
      try {
        entries[i].summary = run(run_cfg, dir);
      } catch (const std::exception& e) {
        entries[i].summary.config_hash = config::config_hash(run_cfg.document);
        entries[i].summary.aborted = true;
        entries[i].summary.error = e.what();
      }
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, seeds.size());
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  auto result = aggregate(std::move(entries));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  write_json(fs::path(out_dir) / "aggregate.json", to_json(result));
  return result;
}

EvalResult eval_checkpoint(const std::string& checkpoint_path, const TrainConfig& cfg) {
  const auto stored = checkpoint::load(checkpoint_path);
  const auto data = prepare_data(cfg);
  auto model = make_model(cfg, data);
  checkpoint::restore(model, stored, checkpoint_path);
  return {analysis::evaluate(model, data.source), analysis::evaluate(model, data.target)};
}

}  // namespace metaalign::runner
