#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "metaalign/rng.hpp"
#include "metaalign/tensor.hpp"

namespace testutil {

inline metaalign::Tensor random_tensor(metaalign::Rng& rng, metaalign::Shape shape,
                                       double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(metaalign::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return metaalign::Tensor(std::move(shape), std::move(v));
}

inline std::vector<double> values_of(const metaalign::Tensor& t) {
  return {t.values().begin(), t.values().end()};
}

inline double max_abs_diff(const metaalign::Tensor& a, const metaalign::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  const double d = std::abs(a - b);
  if (d <= floor) return 0.0;
  return d / std::max(std::abs(a), std::abs(b));
}

/// Largest relative error over matching entries of two gradient maps.
inline double max_rel_err(const metaalign::GradientMap& a, const metaalign::GradientMap& b,
                          double floor = 1e-6) {
  double m = 0.0;
  for (const auto& [id, t] : b) {
    const auto& u = a.at(id);
    for (std::size_t i = 0; i < t.numel(); ++i) m = std::max(m, rel_err(u[i], t[i], floor));
  }
  return m;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("metaalign_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
