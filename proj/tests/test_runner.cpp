#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "metaalign/checkpoint.hpp"
#include "metaalign/errors.hpp"
#include "metaalign/runner.hpp"

using namespace metaalign;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

/// Small two-moons setup that trains in well under a second.
json small_doc() {
  return json::parse(R"({
    "dataset": {"n_per_domain": 120},
    "model": {"hidden": [12, 12], "discriminator_hidden": 8},
    "iterations": 20, "batch_size": 16, "seed": 5, "eval_every": 10
  })");
}

config::TrainConfig cfg_of(const json& doc) { return config::parse_config(doc); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

}  // namespace

TEST_CASE("smoke run: one joint step without alignment") {
  const auto dir = testutil::temp_dir("smoke");
  auto doc = small_doc();
  doc["iterations"] = 1;
  doc["strategy"] = {{"kind", "joint"}};
  doc["alignment"] = {{"lambda", 0.0}};
  const auto s = runner::run(cfg_of(doc), dir.string());
  CHECK(s.steps == 1);
  CHECK_FALSE(s.aborted);
  const auto j = read_json(dir / "summary.json");
  for (const char* key : {"config_hash", "final_target_acc", "mean_grad_cos", "steps", "aborted"}) {
    CHECK(j.contains(key));
  }
  CHECK(j["steps"] == 1);
  CHECK(j["config_hash"] == config::config_hash(doc));
  CHECK(fs::exists(dir / "model.ckpt"));
  const auto records = analysis::read_metrics((dir / "metrics.jsonl").string());
  REQUIRE(records.size() == 1);
  CHECK(records[0].target_acc.has_value());
  CHECK_FALSE(records[0].wallclock_ms.has_value());
}

TEST_CASE("identical config and seed give byte-identical metrics") {
  for (const char* variant : {"DANN", "DANNPE", "MMD"}) {
    CAPTURE(variant);
    auto doc = small_doc();
    doc["alignment"] = {{"variant", variant}};
    doc["model"]["dropout"] = 0.2;
    const auto a = testutil::temp_dir("det_a"), b = testutil::temp_dir("det_b");
    runner::run(cfg_of(doc), a.string());
    runner::run(cfg_of(doc), b.string());
    const auto ma = slurp(a / "metrics.jsonl");
    CHECK_FALSE(ma.empty());
    CHECK(ma == slurp(b / "metrics.jsonl"));
    CHECK(slurp(a / "summary.json") == slurp(b / "summary.json"));
    CHECK(slurp(a / "model.ckpt") == slurp(b / "model.ckpt"));
  }
  SUBCASE("a different seed changes the stream") {
    auto doc = small_doc();
    const auto a = testutil::temp_dir("seed_a"), b = testutil::temp_dir("seed_b");
    runner::run(cfg_of(doc), a.string());
    doc["seed"] = 6;
    runner::run(cfg_of(doc), b.string());
    CHECK(slurp(a / "metrics.jsonl") != slurp(b / "metrics.jsonl"));
  }
}

TEST_CASE("metaalign with alpha zero follows the joint trajectory") {
  for (const char* variant : {"DANN", "MMD"}) {
    CAPTURE(variant);
    auto doc = small_doc();
    doc["alignment"] = {{"variant", variant}};
    doc["optimizer"] = {{"alpha", 0.0}};
    doc["strategy"] = {{"kind", "metaalign"}, {"allow_zero_alpha", true}};
    const auto meta_cfg = cfg_of(doc);
    doc["strategy"] = {{"kind", "joint"}};
    const auto joint_cfg = cfg_of(doc);
    const auto data = runner::prepare_data(meta_cfg);

    std::ostringstream ms, js;
    analysis::MetricsSink msink(ms), jsink(js);
    const auto meta = runner::train(meta_cfg, data, &msink);
    const auto joint = runner::train(joint_cfg, data, &jsink);

    for (const auto& [id, t] : joint.model.params) {
      CAPTURE(id.name);
      CHECK(testutil::max_abs_diff(meta.model.params.at(id), t) <= 1e-12);
    }
    std::istringstream mi(ms.str()), ji(js.str());
    std::string ml, jl;
    std::size_t lines = 0;
    while (std::getline(mi, ml) && std::getline(ji, jl)) {
      const auto m = analysis::metrics_from_json(json::parse(ml));
      const auto j = analysis::metrics_from_json(json::parse(jl));
      CHECK(std::abs(m.L_cls - j.L_cls) <= 1e-12);
      CHECK(std::abs(m.L_dom - j.L_dom) <= 1e-12);
      CHECK(std::abs(m.L_total - j.L_total) <= 1e-12);
      CHECK(std::abs(m.grad_dot_total - j.grad_dot_total) <= 1e-12);
      CHECK(m.L_beta == 0.0);
      CHECK(m.target_acc == j.target_acc);
      ++lines;
    }
    CHECK(lines == 20);
  }
}

TEST_CASE("records and summary") {
  auto doc = small_doc();
  doc["record_wallclock"] = true;
  const auto cfg = cfg_of(doc);
  const auto data = runner::prepare_data(cfg);
  std::ostringstream os;
  analysis::MetricsSink sink(os);
  const auto r = runner::train(cfg, data, &sink);

  std::istringstream is(os.str());
  std::vector<analysis::MetricsRecord> recs;
  for (std::string line; std::getline(is, line);) {
    recs.push_back(analysis::metrics_from_json(json::parse(line)));
  }
  REQUIRE(recs.size() == 20);
  double cos_sum = 0.0;
  std::size_t cos_n = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& rec = recs[i];
    CHECK(rec.iteration == i);
    CHECK(rec.source_acc.has_value() == ((i + 1) % 10 == 0));
    CHECK(rec.wallclock_ms.has_value());
    CHECK(rec.beta.size() == 2);
    CHECK(rec.grad_dot_per_group.size() == 2);
    CHECK(rec.L_dom_cls.has_value());
    CHECK(rec.L_beta >= 0.0);
    if (rec.grad_cos) {
      CHECK(std::abs(*rec.grad_cos) <= 1.0);
      cos_sum += *rec.grad_cos;
      ++cos_n;
    }
    if (i > 0) CHECK(*rec.wallclock_ms >= *recs[i - 1].wallclock_ms);
  }
  CHECK(r.summary.steps == 20);
  CHECK(r.summary.final_target_acc == recs.back().target_acc);
  REQUIRE(r.summary.mean_grad_cos.has_value());
  CHECK(*r.summary.mean_grad_cos == doctest::Approx(cos_sum / cos_n).epsilon(1e-14));
  CHECK(runner::summary_from_json(runner::to_json(r.summary)).steps == 20);

  SUBCASE("target labels are not needed for training") {
    auto blind = data;
    for (auto& y : blind.target.labels) y = 0;
    std::ostringstream os2;
    analysis::MetricsSink sink2(os2);
    const auto r2 = runner::train(cfg, blind, &sink2);
    for (const auto& [id, t] : r.model.params) {
      CHECK(testutil::values_of(r2.model.params.at(id)) == testutil::values_of(t));
    }
  }
}

TEST_CASE("a divergent run is aborted, not thrown") {
  auto doc = small_doc();
  doc["optimizer"] = {{"lr", 1e30}, {"momentum", 0.0}};
  doc["strategy"] = {{"kind", "joint"}};
  const auto dir = testutil::temp_dir("abort");
  const auto s = runner::run(cfg_of(doc), dir.string());
  CHECK(s.aborted);
  CHECK(s.steps < 20);
  REQUIRE(s.error.has_value());
  CHECK(s.error->find("non-finite") != std::string::npos);
  CHECK(read_json(dir / "summary.json")["aborted"] == true);
  CHECK_FALSE(fs::exists(dir / "model.ckpt"));
}

TEST_CASE("eval of a saved checkpoint") {
  const auto dir = testutil::temp_dir("eval");
  const auto cfg = cfg_of(small_doc());
  const auto s = runner::run(cfg, dir.string());
  const auto recs = analysis::read_metrics((dir / "metrics.jsonl").string());
  const auto e = runner::eval_checkpoint((dir / "model.ckpt").string(), cfg);
  CHECK(e.target_acc == *recs.back().target_acc);
  CHECK(e.source_acc == *recs.back().source_acc);
  CHECK(e.target_acc == *s.final_target_acc);

  SUBCASE("missing checkpoint names the path") {
    const auto missing = (dir / "gone.ckpt").string();
    try {
      runner::eval_checkpoint(missing, cfg);
      FAIL("expected IoError");
    } catch (const IoError& err) {
      CHECK(std::string(err.what()).find(missing) != std::string::npos);
    }
  }
  SUBCASE("checkpoint for another architecture") {
    auto doc = small_doc();
    doc["model"]["hidden"] = {7};
    CHECK_THROWS_AS(runner::eval_checkpoint((dir / "model.ckpt").string(), cfg_of(doc)), IoError);
  }
  SUBCASE("single-sample dataset") {
    const auto csv = testutil::temp_dir("eval_csv");
    std::ofstream(csv / "s.csv") << "feature_0,feature_1,label,domain\n0.1,0.2,0,source\n0.5,0.3,1,source\n";
    std::ofstream(csv / "t.csv") << "feature_0,feature_1,label,domain\n0.3,-0.2,1,target\n";
    auto doc = small_doc();
    doc["dataset"] = {{"generator", "csv"},
                      {"source_csv", (csv / "s.csv").string()},
                      {"target_csv", (csv / "t.csv").string()}};
    const auto e1 = runner::eval_checkpoint((dir / "model.ckpt").string(), cfg_of(doc));
    CHECK((e1.target_acc == 0.0 || e1.target_acc == 1.0));
  }
}

TEST_CASE("csv datasets") {
  const auto dir = testutil::temp_dir("run_csv");
  const auto pair = data::gen_gaussian_shift(60, 3, 4, 3.0, 1.0, 2);
  data::write_csv((dir / "s.csv").string(), pair.source);
  data::write_csv((dir / "t.csv").string(), pair.target);
  auto doc = small_doc();
  doc["dataset"] = {{"generator", "csv"},
                    {"source_csv", (dir / "s.csv").string()},
                    {"target_csv", (dir / "t.csv").string()}};
  const auto cfg = cfg_of(doc);
  const auto d = runner::prepare_data(cfg);
  CHECK(d.source.num_classes == 3);
  CHECK(d.source.dim() == 4);
  const auto r = runner::train(cfg, d, nullptr);
  CHECK(r.summary.steps == 20);

  SUBCASE("domain tags must match their role") {
    doc["dataset"]["target_csv"] = (dir / "s.csv").string();
    CHECK_THROWS_AS(runner::prepare_data(cfg_of(doc)), DataError);
  }
  SUBCASE("feature widths must agree") {
    data::write_csv((dir / "t3.csv").string(),
                    data::gen_gaussian_shift(60, 3, 3, 3.0, 1.0, 2).target);
    doc["dataset"]["target_csv"] = (dir / "t3.csv").string();
    CHECK_THROWS_AS(runner::prepare_data(cfg_of(doc)), DataError);
  }
}

TEST_CASE("standardization uses source statistics only") {
  auto doc = small_doc();
  const auto on = runner::prepare_data(cfg_of(doc));
  doc["dataset"]["standardize"] = false;
  const auto off = runner::prepare_data(cfg_of(doc));
  const auto st = data::Standardizer::fit(off.source);
  CHECK(testutil::values_of(st.apply(off.target).features) ==
        testutil::values_of(on.target.features));
}

TEST_CASE("mean_std and aggregate") {
  const auto s = runner::mean_std({1.0, 2.0, 3.0, 4.0});
  CHECK(s.mean == 2.5);
  CHECK(s.std == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));
  CHECK(s.count == 4);
  CHECK(runner::mean_std({}).count == 0);

  std::vector<runner::SweepEntry> entries(4);
  const double accs[] = {0.5, 0.75, 0.9, 0.0};
  for (int i = 0; i < 4; ++i) {
    entries[i].seed = static_cast<std::uint64_t>(i + 1);
    entries[i].summary.final_target_acc = accs[i];
    entries[i].summary.mean_grad_cos = 0.1 * i;
  }
  entries[3].summary.aborted = true;
  const auto agg = runner::aggregate(entries);
  CHECK(agg.any_aborted);
  CHECK(agg.final_target_acc.count == 3);
  CHECK(agg.final_target_acc.mean == doctest::Approx((0.5 + 0.75 + 0.9) / 3).epsilon(1e-15));
  const auto j = runner::to_json(agg);
  CHECK(j["entries"].size() == 4);
  CHECK(j["entries"][3]["seed"] == 4);
  CHECK(j["any_aborted"] == true);
}

TEST_CASE("sweep") {
  const auto dir = testutil::temp_dir("sweep");
  const auto cfg = cfg_of(small_doc());

  SUBCASE("one seed") {
    const auto r = runner::sweep(cfg, {1}, dir.string());
    REQUIRE(r.entries.size() == 1);
    CHECK(r.final_target_acc.std == 0.0);
    CHECK(r.final_target_acc.mean == *r.entries[0].summary.final_target_acc);
    const auto single = read_json(dir / "seed_1" / "summary.json");
    CHECK(single["final_target_acc"] == r.final_target_acc.mean);
    CHECK(fs::exists(dir / "aggregate.json"));
  }
  SUBCASE("several seeds in parallel match sequential runs") {
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4};
    const auto par = runner::sweep(cfg, seeds, (dir / "par").string(), 3);
    const auto seq = runner::sweep(cfg, seeds, (dir / "seq").string(), 1);
    const auto agg = read_json(dir / "par" / "aggregate.json");
    REQUIRE(agg["entries"].size() == 4);
    double sum = 0.0;
    for (const auto& e : agg["entries"]) sum += e["final_target_acc"].get<double>();
    CHECK(agg["final_target_acc"]["mean"].get<double>() == doctest::Approx(sum / 4).epsilon(1e-15));
    CHECK(agg["final_target_acc"]["count"] == 4);
    for (std::size_t i = 0; i < seeds.size(); ++i) {
      CHECK(par.entries[i].seed == seeds[i]);
      const auto name = "seed_" + std::to_string(seeds[i]);
      CHECK(slurp(dir / "par" / name / "metrics.jsonl") ==
            slurp(dir / "seq" / name / "metrics.jsonl"));
      // The per-seed document records its seed, so hashes differ across seeds.
      CHECK(par.entries[i].summary.config_hash == seq.entries[i].summary.config_hash);
    }
    CHECK(par.entries[0].summary.config_hash != par.entries[1].summary.config_hash);
  }
  SUBCASE("a failing seed is recorded and the rest aggregated") {
    auto doc = small_doc();
    doc["optimizer"] = {{"lr", 1e30}, {"momentum", 0.0}};
    doc["strategy"] = {{"kind", "joint"}};
    const auto r = runner::sweep(cfg_of(doc), {1, 2}, (dir / "bad").string());
    CHECK(r.any_aborted);
    CHECK(r.final_target_acc.count == 0);
    CHECK(read_json(dir / "bad" / "aggregate.json")["any_aborted"] == true);
  }
  CHECK_THROWS_AS(runner::sweep(cfg, {}, dir.string()), ContractError);
}
