#pragma once

// Checks shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <numeric>

#include "metaalign/gradcheck.hpp"
#include "metaalign/losses.hpp"
#include "metaalign/optim.hpp"

namespace oracles {

using namespace metaalign;

/// Double-loop biased MMD^2 written independently of the tensor ops.
inline double mmd_double_loop(const Tensor& s, const Tensor& t, double sigma) {
  const std::size_t h = s.cols();
  auto k = [&](const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
    double d = 0.0;
    for (std::size_t c = 0; c < h; ++c) d += (a.at(i, c) - b.at(j, c)) * (a.at(i, c) - b.at(j, c));
    return std::exp(-d / (2.0 * sigma));
  };
  double ss = 0.0, tt = 0.0, st = 0.0;
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < s.rows(); ++j) ss += k(s, i, s, j);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.rows(); ++j) tt += k(t, i, t, j);
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = 0; j < t.rows(); ++j) st += k(s, i, t, j);
  const double ns = static_cast<double>(s.rows()), nt = static_cast<double>(t.rows());
  return ss / (ns * ns) + tt / (nt * nt) - 2.0 * st / (ns * nt);
}

struct MmdOracleResult {
  double max_diff = 0.0;
  /// Largest |MMD^2(F, F)| over the same instances.
  double max_self = 0.0;
};

/// Random instances with n_s, n_t <= 64 and width <= 16.
inline MmdOracleResult mmd_against_double_loop(std::uint64_t seed, int instances) {
  Rng rng(seed);
  MmdOracleResult out;
  auto draw = [&](std::size_t n, std::size_t h, double lo, double hi) {
    std::vector<double> v(n * h);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::matrix(n, h, std::move(v));
  };
  for (int i = 0; i < instances; ++i) {
    const std::size_t ns = 1 + rng.index(64), nt = 1 + rng.index(64), h = 1 + rng.index(16);
    const Tensor s = draw(ns, h, -2.0, 2.0);
    const Tensor t = draw(nt, h, -1.5, 2.5);
    const double sigma = rng.uniform(0.2, 5.0);
    const double v = losses::mmd2_rbf(s, t, sigma).item();
    out.max_diff = std::max(out.max_diff, std::abs(v - mmd_double_loop(s, t, sigma)));
    out.max_self = std::max(out.max_self, std::abs(losses::mmd2_rbf(s, s, sigma).item()));
  }
  return out;
}

struct ToyGrads {
  double theta = 0.0;
  double beta = 0.0;
};

/// L_dom = theta^2 / 2, L_cls = (theta - 1)^2 / 2, one group, B = 1, run
/// through virtual_update and the tape. Alignment is the meta-train task.
inline ToyGrads scalar_toy(double alpha, double theta0 = 1.0, double beta0 = 1.0) {
  const ParamId th{"theta"}, be{"beta"};
  const ParamStore store{{th, Tensor::vector({theta0})}, {be, Tensor::vector({beta0})}};

  GradientMap g_dom;
  {
    Graph g;
    const Tensor t = g.param(th, store.at(th));
    g_dom = backward(scale(reduce_sum(mul(t, t)), 0.5), {th});
  }
  Graph g;
  const Tensor t = g.param(th, store.at(th));
  const Tensor b = g.param(be, store.at(be));
  const nn::Bindings shifted = optim::virtual_update({{th, t}}, g_dom, alpha, b, {{th}});
  const Tensor r = add_scalar(shifted.at(th), -1.0);
  const Tensor total = add(scale(reduce_sum(mul(r, r)), 0.5), losses::beta_penalty(b, 1.0));
  const auto grads = backward(total, {th, be});
  return {g_dom.at(th)[0] + grads.at(th)[0], grads.at(be)[0]};
}

inline double inf_norm_diff(const GradientMap& a, const GradientMap& b,
                            const std::vector<ParamId>& ids) {
  double m = 0.0;
  for (const auto& id : ids) {
    const Tensor& x = a.at(id);
    const Tensor& y = b.at(id);
    for (std::size_t i = 0; i < x.numel(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  }
  return m;
}

inline std::vector<ParamId> non_beta_ids(const nn::ModelBundle& m) {
  std::vector<ParamId> out;
  for (const auto& [id, t] : m.params) {
    if (m.beta.count == 0 || id != m.beta.id) out.push_back(id);
  }
  return out;
}

inline losses::AlignmentKind kind_for(int trial) {
  static const losses::AlignmentKind kinds[] = {losses::AlignmentKind::dann,
                                                losses::AlignmentKind::dannpe,
                                                losses::AlignmentKind::mmd};
  return kinds[trial % 3];
}

struct AlphaZeroResult {
  /// Worst over trials of the gradient and post-update parameter differences.
  double max_grad_diff = 0.0;
  double max_param_diff = 0.0;
  /// Every beta gradient equalled the penalty subgradient alone.
  bool beta_only_penalty = true;
};

inline double penalty_sign(const Tensor& beta, double budget) {
  const auto v = beta.values();
  const double s = std::accumulate(v.begin(), v.end(), 0.0) - budget;
  return static_cast<double>((s > 0.0) - (s < 0.0));
}

/// MetaAlign with alpha = 0 against the joint step, on random nets and batches.
/// Parameters are compared after one SGD step from identical states.
inline AlphaZeroResult alpha_zero_reduction(std::uint64_t seed, int trials) {
  Rng rng(seed);
  AlphaZeroResult out;
  for (int trial = 0; trial < trials; ++trial) {
    const auto kind = kind_for(trial);
    auto f = gradcheck::random_fixture(rng, kind, nn::Activation::relu);
    const auto variant = gradcheck::variant_for(f, kind, 0.5 + rng.uniform());
    const optim::Role role{trial % 2 == 0 ? optim::Task::alignment : optim::Task::classification};
    const auto ids = non_beta_ids(f.model);

    const auto meta = optim::compute_metaalign(f.model, f.batch, variant, 0.0, role);
    const auto joint = optim::compute_joint(f.model, f.batch, variant);
    out.max_grad_diff = std::max(out.max_grad_diff, inf_norm_diff(meta.grads, joint.grads, ids));
    const double expected_beta = penalty_sign(f.model.params.at(f.model.beta.id), f.model.beta.budget);
    for (double g : meta.grads.at(f.model.beta.id).values()) {
      if (g != expected_beta) out.beta_only_penalty = false;
    }

    optim::OptimConfig cfg;
    cfg.alpha = 0.0;
    auto a = f.model;
    auto b = f.model;
    optim::OptimState sa(cfg), sb(cfg);
    sa.no_decay.insert(a.beta.id);
    sb.no_decay.insert(b.beta.id);
    optim::metaalign_step(a, f.batch, variant, sa, role);
    optim::joint_step(b, f.batch, variant, sb);
    out.max_param_diff = std::max(out.max_param_diff, inf_norm_diff(a.params, b.params, ids));
  }
  return out;
}

struct BetaClosedFormResult {
  /// Coordinates where the reported gradient differs from the closed form at all.
  std::size_t mismatches = 0;
  std::size_t coordinates = 0;
  /// Worst |analytic - fd| / max(|analytic|, |fd|) against differences of L_total.
  double max_fd_rel_err = 0.0;
  /// Same, for the entropy-weighted variant only. Its weights are detached but
  /// recomputed at theta', so differences of the L_total value also see how the
  /// weights move with beta. Reported, not held to the tolerance.
  double max_fd_rel_err_weighted = 0.0;
};

/// Adversarial variants use lambda = 1 so the recorded L_dom (= -L_dom_cls) is
/// exactly the quantity the extractor descends.
inline BetaClosedFormResult beta_closed_form(std::uint64_t seed, int trials, double h = 1e-5) {
  Rng rng(seed);
  BetaClosedFormResult out;
  for (int trial = 0; trial < trials; ++trial) {
    const auto kind = kind_for(trial);
    auto f = gradcheck::random_fixture(rng, kind, nn::Activation::tanh);
    const auto variant = gradcheck::variant_for(f, kind, 1.0);
    const double alpha = 0.05 + 0.2 * rng.uniform();
    const optim::Role role{trial % 2 == 0 ? optim::Task::alignment : optim::Task::classification};
    const ParamId bid = f.model.beta.id;

    const auto r = optim::compute_metaalign(f.model, f.batch, variant, alpha, role);
    const Tensor& gb = r.grads.at(bid);
    const double sign = penalty_sign(f.model.params.at(bid), f.model.beta.budget);
    for (std::size_t m = 0; m < gb.numel(); ++m) {
      ++out.coordinates;
      if (gb[m] != -alpha * r.grad_dot_per_group[m] + sign) ++out.mismatches;

      auto at = [&](double delta) {
        auto model = f.model;
        std::vector<double> v(gb.numel());
        for (std::size_t k = 0; k < v.size(); ++k) v[k] = model.params.at(bid)[k];
        v[m] += delta;
        model.params[bid] = Tensor::vector(std::move(v));
        return optim::compute_metaalign(model, f.batch, variant, alpha, role).L_total;
      };
      const double fd = (at(h) - at(-h)) / (2.0 * h);
      const double denom = std::max(std::abs(gb[m]), std::abs(fd));
      const double err = denom == 0.0 ? 0.0 : std::abs(gb[m] - fd) / denom;
      double& worst = kind == losses::AlignmentKind::dannpe ? out.max_fd_rel_err_weighted
                                                            : out.max_fd_rel_err;
      worst = std::max(worst, err);
    }
  }
  return out;
}

}  // namespace oracles
