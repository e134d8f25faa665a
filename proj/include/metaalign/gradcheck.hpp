#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metaalign/data.hpp"
#include "metaalign/losses.hpp"
#include "metaalign/nn.hpp"
#include "metaalign/rng.hpp"
#include "metaalign/tensor.hpp"

namespace metaalign::gradcheck {

struct Tolerance {
  double rel = 1e-4;
  /// Differences below this pass regardless of magnitude.
  double abs_floor = 1e-6;
  double h = 1e-5;
};

/// |a - n| / max(|a|, |n|, abs_floor / rel). At most tol.rel exactly when the
/// pair passes the relative test or the absolute floor.
double scaled_error(double analytic, double numeric, const Tolerance& tol);

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  std::size_t coordinates = 0;
  bool passed = true;
  /// Parameter and coordinate of the largest error.
  std::string worst;
};

/// Compares every coordinate of analytic against numeric * multiplier.
/// multiplier maps each id to the factor FD must be scaled by (1 when absent).
CheckResult compare(const std::string& name, const GradientMap& analytic, const GradientMap& numeric,
                    const Tolerance& tol, const std::map<ParamId, double>& multiplier = {});

struct TaylorRow {
  std::string config;
  double alpha = 0.0;
  double residual = 0.0;
  double residual_half = 0.0;
  /// |R(alpha / 2)| / |R(alpha)|.
  double ratio = 0.0;
  bool passed = true;
};

struct Report {
  std::vector<CheckResult> checks;
  std::vector<TaylorRow> taylor;
  double seconds = 0.0;
  bool passed() const;
  std::vector<std::string> failures() const;
};

/// Small random network plus a paired batch, sized within d <= 8, widths <= 32,
/// K <= 5. Biases and group weights are randomized so nothing sits at a kink
/// by construction.
struct Fixture {
  nn::ModelBundle model;
  data::PairedBatch batch;
};

Fixture random_fixture(Rng& rng, losses::AlignmentKind kind, nn::Activation activation,
                       std::size_t min_layers = 1);

/// lambda as given; MMD bandwidth from the median heuristic on the fixture's batch.
losses::AlignmentVariant variant_for(const Fixture& f, losses::AlignmentKind kind, double lambda);

/// Alphas of the residual-ratio test.
std::vector<double> taylor_alphas();
inline constexpr double kTaylorRatioBound = 0.6;

std::vector<CheckResult> check_ops(std::uint64_t seed, const Tolerance& tol = {});
std::vector<CheckResult> check_losses(std::uint64_t seed, const Tolerance& tol = {});
std::vector<CheckResult> check_meta_step(std::uint64_t seed, const Tolerance& tol = {});
std::vector<TaylorRow> taylor_residuals(std::uint64_t seed);

/// The full suite.
Report run_suite(std::uint64_t seed = 1, const Tolerance& tol = {});

std::string format_report(const Report& report);

/// Op kind by its printed name, for the fault-injection switch.
std::optional<OpKind> parse_op_kind(const std::string& name);

}  // namespace metaalign::gradcheck
