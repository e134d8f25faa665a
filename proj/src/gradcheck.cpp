#include "metaalign/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "metaalign/data.hpp"
#include "metaalign/errors.hpp"
#include "metaalign/losses.hpp"
#include "metaalign/nn.hpp"
#include "metaalign/optim.hpp"
#include "metaalign/rng.hpp"

namespace metaalign::gradcheck {

double scaled_error(double analytic, double numeric, const Tolerance& tol) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), tol.abs_floor / tol.rel});
  return std::abs(analytic - numeric) / denom;
}

CheckResult compare(const std::string& name, const GradientMap& analytic, const GradientMap& numeric,
                    const Tolerance& tol, const std::map<ParamId, double>& multiplier) {
  CheckResult r;
  r.name = name;
  for (const auto& [id, n] : numeric) {
    const auto a = analytic.find(id);
    if (a == analytic.end()) throw ContractError("gradcheck: no analytic gradient for " + id.name);
    if (a->second.numel() != n.numel()) {
      throw DimensionError("gradcheck: gradient shape mismatch for " + id.name);
    }
    const auto m = multiplier.find(id);
    const double factor = m == multiplier.end() ? 1.0 : m->second;
    for (std::size_t i = 0; i < n.numel(); ++i) {
      const double e = scaled_error(a->second[i], factor * n[i], tol);
      ++r.coordinates;
      // NaN compares false, so test the negation.
      if (!(e <= r.max_error)) {
        r.max_error = std::isnan(e) ? INFINITY : e;
        r.worst = id.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  r.passed = r.max_error <= tol.rel;
  return r;
}

bool Report::passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; }) &&
         std::all_of(taylor.begin(), taylor.end(), [](const auto& t) { return t.passed; });
}

std::vector<std::string> Report::failures() const {
  std::vector<std::string> out;
  for (const auto& c : checks) {
    if (!c.passed) out.push_back(c.name);
  }
  for (const auto& t : taylor) {
    if (!t.passed) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "taylor %s alpha=%g", t.config.c_str(), t.alpha);
      out.emplace_back(buf);
    }
  }
  return out;
}

std::vector<double> taylor_alphas() { return {1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5}; }

namespace {

constexpr OpKind kAllOps[] = {
    OpKind::matmul,  OpKind::add,        OpKind::sub,         OpKind::mul,
    OpKind::add_row_bias, OpKind::scale, OpKind::add_scalar,  OpKind::mul_scalar,
    OpKind::relu,    OpKind::tanh,       OpKind::sigmoid,     OpKind::exp,
    OpKind::log,     OpKind::abs,        OpKind::clamp,       OpKind::log_softmax,
    OpKind::reduce_sum, OpKind::reduce_mean, OpKind::pick,    OpKind::element,
    OpKind::pairwise_sq_dist, OpKind::gradient_scale, OpKind::concat_flat, OpKind::slice,
    OpKind::group_shift,
};

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

/// Values in [-hi, -lo] U [lo, hi]: keeps kinked ops away from their kinks.
Tensor away_from(Rng& rng, Shape shape, double center, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = center + (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

using Fn = std::function<Tensor(const nn::Bindings&)>;

/// Projects fn's output onto a fixed random tensor so every output
/// coordinate contributes, then compares backward with central differences.
CheckResult check_fn(const std::string& name, const ParamStore& leaves, const Fn& fn, Rng& rng,
                     const Tolerance& tol, const std::map<ParamId, double>& multiplier = {}) {
  const Tensor probe_shape = fn(leaves);
  const Tensor weights = random_tensor(rng, probe_shape.shape(), 0.5, 1.5);
  auto project = [&](const nn::Bindings& b) { return reduce_sum(mul(fn(b), weights)); };

  Graph graph;
  const auto analytic = backward(project(nn::bind(graph, leaves)), ids_of(leaves));
  const auto numeric = finite_diff_grad(
      [&](const ParamStore& p) { return project(p).item(); }, leaves, ids_of(leaves), tol.h);
  return compare(name, analytic, numeric, tol, multiplier);
}

const ParamId A{"a"}, B{"b"}, S{"s"};

}  // namespace

std::optional<OpKind> parse_op_kind(const std::string& name) {
  for (OpKind k : kAllOps) {
    if (name == op_name(k)) return k;
  }
  return std::nullopt;
}

std::vector<CheckResult> check_ops(std::uint64_t seed, const Tolerance& tol) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  auto op = [&](const std::string& name, ParamStore leaves, const Fn& fn,
                const std::map<ParamId, double>& multiplier = {}) {
    out.push_back(check_fn("op " + name, leaves, fn, rng, tol, multiplier));
  };
  auto x = [&](Shape s) { return random_tensor(rng, std::move(s)); };

  op("matmul", {{A, x({3, 4})}, {B, x({4, 5})}},
     [](const nn::Bindings& p) { return matmul(p.at(A), p.at(B)); });
  op("add", {{A, x({3, 4})}, {B, x({3, 4})}},
     [](const nn::Bindings& p) { return add(p.at(A), p.at(B)); });
  op("sub", {{A, x({3, 4})}, {B, x({3, 4})}},
     [](const nn::Bindings& p) { return sub(p.at(A), p.at(B)); });
  op("mul", {{A, x({3, 4})}, {B, x({3, 4})}},
     [](const nn::Bindings& p) { return mul(p.at(A), p.at(B)); });
  op("add_row_bias", {{A, x({3, 4})}, {B, x({4})}},
     [](const nn::Bindings& p) { return add_row_bias(p.at(A), p.at(B)); });
  op("scale", {{A, x({3, 4})}}, [](const nn::Bindings& p) { return scale(p.at(A), -1.7); });
  op("add_scalar", {{A, x({3, 4})}},
     [](const nn::Bindings& p) { return add_scalar(p.at(A), 0.3); });
  op("mul_scalar", {{S, Tensor::scalar(rng.uniform(0.5, 2.0))}, {A, x({3, 4})}},
     [](const nn::Bindings& p) { return mul_scalar(p.at(S), p.at(A)); });
  op("relu", {{A, away_from(rng, {4, 5}, 0.0, 0.05, 1.0)}},
     [](const nn::Bindings& p) { return relu(p.at(A)); });
  op("tanh", {{A, x({4, 5})}}, [](const nn::Bindings& p) { return tanh(p.at(A)); });
  op("sigmoid", {{A, random_tensor(rng, {4, 5}, -4.0, 4.0)}},
     [](const nn::Bindings& p) { return sigmoid(p.at(A)); });
  op("exp", {{A, x({4, 5})}}, [](const nn::Bindings& p) { return exp(p.at(A)); });
  op("log", {{A, random_tensor(rng, {4, 5}, 0.2, 3.0)}},
     [](const nn::Bindings& p) { return log(p.at(A)); });
  op("abs", {{A, away_from(rng, {4, 5}, 0.0, 0.05, 1.0)}},
     [](const nn::Bindings& p) { return abs(p.at(A)); });
  op("clamp", {{A, away_from(rng, {4, 5}, 0.0, 0.05, 0.9)}},
     [](const nn::Bindings& p) { return clamp(p.at(A), -0.5, 0.5); });
  op("log_softmax", {{A, random_tensor(rng, {4, 5}, -3.0, 3.0)}},
     [](const nn::Bindings& p) { return log_softmax(p.at(A)); });
  op("softmax", {{A, random_tensor(rng, {4, 5}, -3.0, 3.0)}},
     [](const nn::Bindings& p) { return softmax(p.at(A)); });
  op("reduce_sum", {{A, x({3, 4})}}, [](const nn::Bindings& p) { return reduce_sum(p.at(A)); });
  op("reduce_mean", {{A, x({3, 4})}}, [](const nn::Bindings& p) { return reduce_mean(p.at(A)); });
  op("reduce_mean axis0", {{A, x({3, 4})}},
     [](const nn::Bindings& p) { return reduce_mean(p.at(A), 0); });
  op("reduce_mean axis1", {{A, x({3, 4})}},
     [](const nn::Bindings& p) { return reduce_mean(p.at(A), 1); });
  {
    std::vector<int> idx(4);
    for (auto& i : idx) i = static_cast<int>(rng.index(5));
    op("pick", {{A, x({4, 5})}}, [idx](const nn::Bindings& p) { return pick(p.at(A), idx); });
  }
  op("element", {{A, x({3, 4})}}, [](const nn::Bindings& p) { return element(p.at(A), 7); });
  op("pairwise_sq_dist", {{A, x({3, 4})}, {B, x({5, 4})}},
     [](const nn::Bindings& p) { return pairwise_sq_dist(p.at(A), p.at(B)); });
  // Forward is the identity, so the analytic gradient is factor times the numeric one.
  op("gradient_scale", {{A, x({3, 4})}},
     [](const nn::Bindings& p) { return gradient_scale(p.at(A), -0.8); }, {{A, -0.8}});
  op("concat_flat", {{A, x({2, 3})}, {B, x({4})}}, [](const nn::Bindings& p) {
    const Tensor parts[] = {p.at(A), p.at(B)};
    return concat_flat(parts);
  });
  op("slice", {{A, x({10})}}, [](const nn::Bindings& p) { return slice(p.at(A), 2, {2, 3}); });
  {
    const Tensor dir = x({7});
    op("group_shift", {{A, x({7})}, {B, random_tensor(rng, {3}, 0.5, 1.5)}},
       [dir](const nn::Bindings& p) { return group_shift(p.at(A), p.at(B), 1, dir, 0.3); });
  }
  return out;
}

Fixture random_fixture(Rng& rng, losses::AlignmentKind kind, nn::Activation activation,
                       std::size_t min_layers) {
  nn::ModelSpec spec;
  spec.input_dim = 2 + rng.index(7);
  const std::size_t layers = min_layers + rng.index(3);
  spec.hidden.clear();
  for (std::size_t i = 0; i < layers; ++i) spec.hidden.push_back(4 + rng.index(29));
  if (rng.uniform() < 0.5) spec.classifier_hidden = {4 + rng.index(13)};
  spec.num_classes = 2 + rng.index(4);
  spec.discriminator_input = kind == losses::AlignmentKind::dann     ? nn::DiscriminatorInput::features
                             : kind == losses::AlignmentKind::dannpe ? nn::DiscriminatorInput::probabilities
                                                                     : nn::DiscriminatorInput::none;
  spec.discriminator_hidden = 4 + rng.index(29);
  spec.activation = activation;
  Fixture f{nn::build_model(spec), {}};
  nn::init_params(f.model, rng.index(1u << 30));
  // Random biases and group weights off the budget kink make the check generic.
  for (auto& [id, t] : f.model.params) {
    if (id.name.ends_with(".bias")) t = random_tensor(rng, t.shape(), -0.3, 0.3);
  }
  if (f.model.beta.count > 0) {
    f.model.params[f.model.beta.id] = random_tensor(rng, {f.model.beta.count}, 0.3, 1.7);
  }
  const std::size_t ns = 5 + rng.index(6), nt = 5 + rng.index(6);
  f.batch.src_features = random_tensor(rng, {ns, spec.input_dim}, -1.5, 1.5);
  f.batch.tgt_features = random_tensor(rng, {nt, spec.input_dim}, -1.0, 2.0);
  for (std::size_t i = 0; i < ns; ++i) {
    f.batch.src_labels.push_back(static_cast<int>(rng.index(spec.num_classes)));
  }
  return f;
}

losses::AlignmentVariant variant_for(const Fixture& f, losses::AlignmentKind kind, double lambda) {
  losses::AlignmentVariant v{kind, lambda, 1.0};
  if (kind == losses::AlignmentKind::mmd) {
    v.sigma = losses::median_sq_distance(
        nn::extract_features(f.model.extractor, f.model.params, f.batch.src_features),
        nn::extract_features(f.model.extractor, f.model.params, f.batch.tgt_features));
  }
  return v;
}

namespace {

std::set<ParamId> without_beta(const nn::ModelBundle& m) {
  auto ids = ids_of(m.params);
  if (m.beta.count > 0) ids.erase(m.beta.id);
  return ids;
}

std::map<ParamId, double> factor_for(const std::vector<ParamId>& ids, double factor) {
  std::map<ParamId, double> out;
  for (const auto& id : ids) out[id] = factor;
  return out;
}

}  // namespace

std::vector<CheckResult> check_losses(std::uint64_t seed, const Tolerance& tol) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  constexpr int kTrials = 3;
  using losses::AlignmentKind;

  auto worst_of = [](std::vector<CheckResult> trials) {
    auto r = trials.front();
    for (const auto& t : trials) {
      if (t.max_error >= r.max_error) r = t;
    }
    r.passed = std::all_of(trials.begin(), trials.end(), [](const auto& t) { return t.passed; });
    return r;
  };

  {
    std::vector<CheckResult> trials;
    for (int t = 0; t < kTrials; ++t) {
      auto f = random_fixture(rng, AlignmentKind::dann, nn::Activation::relu);
      auto loss = [&](const nn::Bindings& p) {
        return losses::cross_entropy(
            nn::classify(f.model.classifier, p,
                         nn::extract_features(f.model.extractor, p, f.batch.src_features)),
            f.batch.src_labels);
      };
      const auto ids = without_beta(f.model);
      Graph g;
      const auto analytic = backward(loss(nn::bind(g, f.model.params)), ids);
      const auto numeric = finite_diff_grad(
          [&](const ParamStore& p) { return loss(p).item(); }, f.model.params, ids, tol.h);
      trials.push_back(compare("loss L_cls", analytic, numeric, tol));
    }
    out.push_back(worst_of(trials));
  }

  // Adversarial variants: the objective's value is the domain classification
  // loss; parameters upstream of the reversal receive -lambda times its gradient.
  for (auto kind : {AlignmentKind::dann, AlignmentKind::dannpe, AlignmentKind::mmd}) {
    std::vector<CheckResult> trials;
    for (int t = 0; t < kTrials; ++t) {
      auto f = random_fixture(rng, kind, nn::Activation::relu);
      const auto variant = variant_for(f, kind, rng.uniform(0.5, 1.5));
      std::optional<std::pair<Tensor, Tensor>> weights;
      if (kind == AlignmentKind::dannpe) {
        const auto& m = f.model;
        auto probs = [&](const Tensor& x) {
          return softmax(nn::classify(m.classifier, m.params,
                                      nn::extract_features(m.extractor, m.params, x)));
        };
        weights = std::make_pair(losses::entropy_weights(probs(f.batch.src_features)),
                                 losses::entropy_weights(probs(f.batch.tgt_features)));
      }
      auto objective = [&](const nn::Bindings& p) {
        const Tensor fs = nn::extract_features(f.model.extractor, p, f.batch.src_features);
        const Tensor ft = nn::extract_features(f.model.extractor, p, f.batch.tgt_features);
        return losses::alignment_loss(variant, {f.model, p, fs, ft, nullptr, weights}).objective;
      };
      const auto ids = without_beta(f.model);
      Graph g;
      const auto analytic = backward(objective(nn::bind(g, f.model.params)), ids);
      const auto numeric = finite_diff_grad(
          [&](const ParamStore& p) { return objective(p).item(); }, f.model.params, ids, tol.h);
      std::map<ParamId, double> multiplier;
      if (kind != AlignmentKind::mmd) {
        multiplier = factor_for(f.model.theta_ids(), -variant.lambda);
        if (kind == AlignmentKind::dannpe) {
          for (const auto& id : f.model.classifier_ids()) multiplier[id] = -variant.lambda;
        }
      }
      trials.push_back(
          compare("loss " + losses::to_string(kind), analytic, numeric, tol, multiplier));
    }
    out.push_back(worst_of(trials));
  }
  return out;
}

namespace {

/// Loss values of one meta-step evaluated without a graph, for differencing.
/// The virtual-update direction is held fixed at the value computed at the
/// unperturbed parameters.
struct MetaStepOracle {
  const nn::ModelBundle& model;
  const data::PairedBatch& batch;
  losses::AlignmentVariant variant;
  double alpha;
  optim::Role role;
  GradientMap direction;

  struct Values {
    double cls_train = 0.0, align_train = 0.0, cls_test = 0.0, align_test = 0.0;
    double dom_cls_train = 0.0, dom_cls_test = 0.0, penalty = 0.0;
  };

  /// Scalar whose gradient equals the analytic one for parameters upstream of
  /// the gradient reversal (extractor, group weights, classifier).
  double upstream(const ParamStore& p) const {
    const auto v = values(p);
    return v.cls_train + v.align_train + v.cls_test + v.align_test + v.penalty;
  }

  /// Scalar for discriminator parameters, which the reversal does not affect.
  double discriminator(const ParamStore& p) const {
    const auto v = values(p);
    return v.dom_cls_train + v.dom_cls_test;
  }

  Values values(const ParamStore& p) const {
    Values v;
    auto cls = [&](const nn::Bindings& b) {
      return losses::cross_entropy(
                 nn::classify(model.classifier, b,
                              nn::extract_features(model.extractor, b, batch.src_features)),
                 batch.src_labels)
          .item();
    };
    // Alignment contribution as seen by upstream parameters, plus D's loss.
    auto align = [&](const nn::Bindings& b) -> std::pair<double, double> {
      const Tensor fs = nn::extract_features(model.extractor, b, batch.src_features);
      const Tensor ft = nn::extract_features(model.extractor, b, batch.tgt_features);
      const auto term = losses::alignment_loss(variant, {model, b, fs, ft, nullptr, {}});
      if (!term.dom_cls) return {term.objective.item(), 0.0};
      return {-variant.lambda * *term.dom_cls, *term.dom_cls};
    };
    if (role.meta_train == optim::Task::alignment) {
      std::tie(v.align_train, v.dom_cls_train) = align(p);
    } else {
      v.cls_train = cls(p);
    }
    nn::Bindings shifted = p;
    for (auto& [id, t] : optim::virtual_update(p, direction, alpha, p.at(model.beta.id),
                                               model.groups)) {
      shifted.insert_or_assign(id, t);
    }
    if (role.meta_test() == optim::Task::classification) {
      v.cls_test = cls(shifted);
    } else {
      std::tie(v.align_test, v.dom_cls_test) = align(shifted);
    }
    v.penalty = losses::beta_penalty(p.at(model.beta.id), model.beta.budget).item();
    return v;
  }
};

GradientMap meta_train_direction(const nn::ModelBundle& model, const data::PairedBatch& batch,
                                 const losses::AlignmentVariant& variant, optim::Role role) {
  Graph g;
  const auto p = nn::bind(g, model.params);
  const Tensor fs = nn::extract_features(model.extractor, p, batch.src_features);
  Tensor loss;
  if (role.meta_train == optim::Task::alignment) {
    const Tensor ft = nn::extract_features(model.extractor, p, batch.tgt_features);
    loss = losses::alignment_loss(variant, {model, p, fs, ft, nullptr, {}}).objective;
  } else {
    loss = losses::cross_entropy(nn::classify(model.classifier, p, fs), batch.src_labels);
  }
  const auto theta = model.theta_ids();
  return backward(loss, std::set<ParamId>(theta.begin(), theta.end()));
}

}  // namespace

std::vector<CheckResult> check_meta_step(std::uint64_t seed, const Tolerance& tol) {
  Rng rng(seed);
  std::vector<CheckResult> out;
  using losses::AlignmentKind;
  for (auto kind : {AlignmentKind::dann, AlignmentKind::mmd}) {
    for (auto task : {optim::Task::alignment, optim::Task::classification}) {
      const optim::Role role{task};
      auto f = random_fixture(rng, kind, nn::Activation::relu);
      const auto variant = variant_for(f, kind, rng.uniform(0.5, 1.5));
      const double alpha = rng.uniform(0.05, 0.5);
      const auto report = optim::compute_metaalign(f.model, f.batch, variant, alpha, role);
      const MetaStepOracle oracle{f.model, f.batch, variant, alpha, role,
                                  meta_train_direction(f.model, f.batch, variant, role)};

      std::set<ParamId> up, disc;
      for (const auto& id : f.model.theta_ids()) up.insert(id);
      for (const auto& id : f.model.classifier_ids()) up.insert(id);
      for (const auto& id : f.model.discriminator_ids()) disc.insert(id);
      const std::string tag = " " + losses::to_string(kind) + " meta-train=" +
                              (task == optim::Task::alignment ? "align" : "cls");

      auto fd = [&](auto member, const std::set<ParamId>& which) {
        return finite_diff_grad([&](const ParamStore& p) { return (oracle.*member)(p); },
                                f.model.params, which, tol.h);
      };
      auto numeric = fd(&MetaStepOracle::upstream, up);
      if (!disc.empty()) {
        auto d = fd(&MetaStepOracle::discriminator, disc);
        numeric.insert(d.begin(), d.end());
      }
      out.push_back(compare("meta-step theta/phi" + tag, report.grads, numeric, tol));
      out.push_back(compare("meta-step beta" + tag, report.grads,
                            fd(&MetaStepOracle::upstream, {f.model.beta.id}), tol));
    }
  }
  return out;
}

std::vector<TaylorRow> taylor_residuals(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TaylorRow> out;
  using losses::AlignmentKind;
  for (auto kind : {AlignmentKind::dann, AlignmentKind::mmd}) {
    auto f = random_fixture(rng, kind, nn::Activation::tanh);
    const auto variant = variant_for(f, kind, 1.0);
    const auto g_dom = meta_train_direction(f.model, f.batch, variant, optim::Role{optim::Task::alignment});

    auto cls_at = [&](const ParamStore& p) {
      return losses::cross_entropy(
          nn::classify(f.model.classifier, p,
                       nn::extract_features(f.model.extractor, p, f.batch.src_features)),
          f.batch.src_labels);
    };
    const auto theta = f.model.theta_ids();
    Graph g;
    const Tensor base_loss = cls_at(nn::bind(g, f.model.params));
    const double base = base_loss.item();
    const auto grad_cls = backward(base_loss, std::set<ParamId>(theta.begin(), theta.end()));
    double inner = 0.0;
    for (const auto& id : theta) {
      for (std::size_t i = 0; i < g_dom.at(id).numel(); ++i) inner += grad_cls.at(id)[i] * g_dom.at(id)[i];
    }
    auto residual = [&](double a) {
      ParamStore p = f.model.params;
      for (const auto& id : theta) {
        std::vector<double> v(p.at(id).values().begin(), p.at(id).values().end());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= a * g_dom.at(id)[i];
        p[id] = Tensor(p.at(id).shape(), std::move(v));
      }
      return cls_at(p).item() - base + a * inner;
    };
    for (double a : taylor_alphas()) {
      TaylorRow row;
      row.config = losses::to_string(kind) + "/tanh";
      row.alpha = a;
      row.residual = residual(a);
      row.residual_half = residual(a / 2);
      row.ratio = std::abs(row.residual_half) / std::abs(row.residual);
      row.passed = row.ratio <= kTaylorRatioBound;
      out.push_back(row);
    }
  }
  return out;
}

Report run_suite(std::uint64_t seed, const Tolerance& tol) {
  const auto start = std::chrono::steady_clock::now();
  Report r;
  for (auto&& part : {check_ops(derive_seed(seed, 1), tol), check_losses(derive_seed(seed, 2), tol),
                      check_meta_step(derive_seed(seed, 3), tol)}) {
    r.checks.insert(r.checks.end(), part.begin(), part.end());
  }
  r.taylor = taylor_residuals(derive_seed(seed, 4));
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::string format_report(const Report& report) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-44s %12s %7s  %-6s %s\n", "check", "max_rel_err", "coords",
                "status", "worst");
  os << buf;
  for (const auto& c : report.checks) {
    std::snprintf(buf, sizeof buf, "%-44s %12.3e %7zu  %-6s %s\n", c.name.c_str(), c.max_error,
                  c.coordinates, c.passed ? "ok" : "FAIL", c.passed ? "" : c.worst.c_str());
    os << buf;
  }
  os << '\n';
  std::snprintf(buf, sizeof buf, "%-14s %10s %14s %14s %9s  %s\n", "taylor", "alpha", "R(alpha)",
                "R(alpha/2)", "ratio", "status");
  os << buf;
  for (const auto& t : report.taylor) {
    std::snprintf(buf, sizeof buf, "%-14s %10.1e %14.6e %14.6e %9.4f  %s\n", t.config.c_str(),
                  t.alpha, t.residual, t.residual_half, t.ratio, t.passed ? "ok" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "\n%zu checks, %zu taylor rows, %.2f s: %s\n",
                report.checks.size(), report.taylor.size(), report.seconds,
                report.passed() ? "PASS" : "FAIL");
  os << buf;
  return os.str();
}

}  // namespace metaalign::gradcheck
