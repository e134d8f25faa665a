#include "metaalign/optim.hpp"

#include <cmath>

#include "metaalign/errors.hpp"

namespace metaalign::optim {

void validate(const OptimConfig& c) {
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) throw ContractError("learning rate must be positive");
  if (!(c.alpha >= 0.0) || !std::isfinite(c.alpha)) {
    throw ContractError("meta learning rate must be nonnegative");
  }
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ContractError("momentum must lie in [0, 1)");
  if (!(c.weight_decay >= 0.0) || !std::isfinite(c.weight_decay)) {
    throw ContractError("weight decay must be nonnegative");
  }
}

OptimState::OptimState(OptimConfig config) : config_(config) { validate(config_); }

void sgd_update(ParamStore& params, const GradientMap& grads, OptimState& state) {
  const auto& c = state.config();
  for (const auto& [id, g] : grads) {
    auto it = params.find(id);
    if (it == params.end()) throw ContractError("sgd_update: unknown parameter " + id.name);
    const Tensor& p = it->second;
    if (p.shape() != g.shape()) {
      throw DimensionError("sgd_update: gradient shape " + shape_string(g.shape()) +
                           " does not match parameter " + id.name + " " + shape_string(p.shape()));
    }
    auto& v = state.velocity[id];
    if (v.empty()) v.assign(p.numel(), 0.0);
    const double wd = state.no_decay.count(id) ? 0.0 : c.weight_decay;
    std::vector<double> next(p.numel());
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double step = wd > 0.0 ? g[i] + wd * p[i] : g[i];
      v[i] = c.momentum * v[i] + step;
      next[i] = p[i] - c.lr * v[i];
    }
    it->second = Tensor(p.shape(), std::move(next));
  }
}

RolePolicy parse_role_policy(const std::string& name) {
  if (name == "align_train") return RolePolicy::align_train;
  if (name == "cls_train") return RolePolicy::cls_train;
  if (name == "alternate") return RolePolicy::alternate;
  throw ContractError("unknown role policy: " + name);
}

std::string to_string(RolePolicy policy) {
  switch (policy) {
    case RolePolicy::align_train: return "align_train";
    case RolePolicy::cls_train: return "cls_train";
    case RolePolicy::alternate: return "alternate";
  }
  return "?";
}

Role role_schedule(RolePolicy policy, std::size_t iteration) {
  switch (policy) {
    case RolePolicy::align_train: return Role{Task::alignment};
    case RolePolicy::cls_train: return Role{Task::classification};
    case RolePolicy::alternate:
      return Role{iteration % 2 == 0 ? Task::alignment : Task::classification};
  }
  throw ContractError("unknown role policy");
}

namespace {

std::set<ParamId> all_ids(const nn::ModelBundle& model) { return ids_of(model.params); }

GradientMap restrict_to(const GradientMap& g, const std::vector<ParamId>& ids) {
  GradientMap out;
  for (const auto& id : ids) out.emplace(id, g.at(id));
  return out;
}

std::vector<double> beta_values(const nn::ModelBundle& model) {
  if (model.beta.count == 0) return {};
  const auto v = model.params.at(model.beta.id).values();
  return {v.begin(), v.end()};
}

double beta_penalty_value(const nn::ModelBundle& model) {
  if (model.beta.count == 0) return 0.0;
  return losses::beta_penalty(model.params.at(model.beta.id), model.beta.budget).item();
}

void require_batch(const data::PairedBatch& batch) {
  if (batch.src_labels.empty() || batch.src_features.numel() == 0 ||
      batch.tgt_features.numel() == 0) {
    throw ContractError("step: batch must be nonempty in both domains");
  }
}

void check_finite(const StepReport& r, std::size_t iteration) {
  auto bad = [&](const std::string& what) {
    throw NonFiniteError("non-finite " + what + " at iteration " + std::to_string(iteration),
                         iteration);
  };
  if (!std::isfinite(r.L_cls)) bad("classification loss");
  if (!std::isfinite(r.L_dom)) bad("alignment loss");
  if (!std::isfinite(r.L_total)) bad("total loss");
  for (const auto& [id, g] : r.grads) {
    if (!g.all_finite()) bad("gradient of " + id.name);
  }
}

}  // namespace

StepReport compute_joint(const nn::ModelBundle& model, const data::PairedBatch& batch,
                         const losses::AlignmentVariant& variant, const StepContext& ctx) {
  require_batch(batch);
  Graph graph;
  const nn::Bindings params = nn::bind(graph, model.params);
  const Tensor fs = nn::extract_features(model.extractor, params, batch.src_features);
  const Tensor ft = nn::extract_features(model.extractor, params, batch.tgt_features);
  const Tensor cls = losses::cross_entropy(nn::classify(model.classifier, params, fs),
                                           batch.src_labels);
  auto term = losses::alignment_loss(variant, {model, params, fs, ft, ctx.dropout_rng, {}});

  const Tensor roots[] = {cls, term.objective};
  auto grads = backward(roots, all_ids(model));

  StepReport r;
  r.L_cls = cls.item();
  r.L_dom_cls = term.dom_cls;
  r.L_dom = term.dom;
  r.L_beta = beta_penalty_value(model);
  r.L_total = r.L_cls + r.L_dom;
  r.clamped = term.clamped;
  r.beta = beta_values(model);

  const auto theta = model.theta_ids();
  const auto dots = analysis::grad_dot(restrict_to(grads[1], theta), restrict_to(grads[0], theta),
                                       model.groups);
  r.grad_dot_per_group = dots.per_group;
  r.grad_dot_total = dots.total;
  r.grad_cos = dots.cosine;

  r.grads = add_gradients(grads[0], grads[1]);
  if (model.beta.count > 0) r.grads.erase(model.beta.id);
  return r;
}

StepReport joint_step(nn::ModelBundle& model, const data::PairedBatch& batch,
                      const losses::AlignmentVariant& variant, OptimState& state,
                      const StepContext& ctx) {
  StepReport r = compute_joint(model, batch, variant, ctx);
  check_finite(r, ctx.iteration);
  sgd_update(model.params, r.grads, state);
  return r;
}

nn::Bindings virtual_update(const nn::Bindings& theta, const GradientMap& direction, double alpha,
                            const Tensor& beta, const std::vector<std::vector<ParamId>>& groups) {
  if (beta.numel() != groups.size()) {
    throw ContractError("virtual_update: " + std::to_string(beta.numel()) + " group weights for " +
                        std::to_string(groups.size()) + " groups");
  }
  nn::Bindings out;
  for (std::size_t m = 0; m < groups.size(); ++m) {
    std::vector<Tensor> params, dirs;
    for (const auto& id : groups[m]) {
      const auto t = theta.find(id);
      const auto d = direction.find(id);
      if (t == theta.end() || d == direction.end()) {
        throw ContractError("virtual_update: group " + std::to_string(m) + " parameter " + id.name +
                            " missing");
      }
      if (d->second.attached()) {
        throw ContractError("virtual_update: direction for " + id.name + " must be detached");
      }
      if (d->second.numel() != t->second.numel()) {
        throw DimensionError("virtual_update: direction shape mismatch for " + id.name);
      }
      params.push_back(t->second);
      dirs.push_back(d->second);
    }
    const Tensor shifted =
        group_shift(concat_flat(params), beta, m, concat_flat(dirs), alpha);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < params.size(); ++k) {
      out.emplace(groups[m][k], slice(shifted, offset, params[k].shape()));
      offset += params[k].numel();
    }
  }
  return out;
}

StepReport compute_metaalign(const nn::ModelBundle& model, const data::PairedBatch& batch,
                             const losses::AlignmentVariant& variant, double alpha, Role role,
                             const StepContext& ctx) {
  require_batch(batch);
  if (model.groups.empty() || model.beta.count == 0) {
    throw ContractError("metaalign: the feature extractor has no parameter groups");
  }
  const auto ids = all_ids(model);
  const auto theta = model.theta_ids();
  StepReport r;
  r.beta = beta_values(model);

  // Phase 1: meta-train loss at theta.
  GradientMap meta_train_grads;
  {
    Graph graph;
    const nn::Bindings params = nn::bind(graph, model.params);
    const Tensor fs = nn::extract_features(model.extractor, params, batch.src_features);
    if (role.meta_train == Task::alignment) {
      const Tensor ft = nn::extract_features(model.extractor, params, batch.tgt_features);
      auto term = losses::alignment_loss(variant, {model, params, fs, ft, ctx.dropout_rng, {}});
      r.L_dom_cls = term.dom_cls;
      r.L_dom = term.dom;
      r.clamped = term.clamped;
      meta_train_grads = backward(term.objective, ids);
    } else {
      const Tensor cls = losses::cross_entropy(nn::classify(model.classifier, params, fs),
                                               batch.src_labels);
      r.L_cls = cls.item();
      meta_train_grads = backward(cls, ids);
    }
  }

  // Phase 2: meta-test loss at theta' plus the budget penalty.
  GradientMap meta_test_grads;
  {
    Graph graph;
    nn::Bindings params = nn::bind(graph, model.params);
    const Tensor& beta = params.at(model.beta.id);
    for (auto& [id, t] : virtual_update(params, restrict_to(meta_train_grads, theta), alpha, beta,
                                        model.groups)) {
      params.insert_or_assign(id, t);
    }
    const Tensor fs = nn::extract_features(model.extractor, params, batch.src_features);
    Tensor objective;
    if (role.meta_test() == Task::classification) {
      objective = losses::cross_entropy(nn::classify(model.classifier, params, fs),
                                        batch.src_labels);
      r.L_cls = objective.item();
    } else {
      const Tensor ft = nn::extract_features(model.extractor, params, batch.tgt_features);
      auto term = losses::alignment_loss(variant, {model, params, fs, ft, ctx.dropout_rng, {}});
      r.L_dom_cls = term.dom_cls;
      r.L_dom = term.dom;
      r.clamped = term.clamped;
      objective = term.objective;
    }
    const Tensor penalty = losses::beta_penalty(beta, model.beta.budget);
    r.L_beta = penalty.item();
    meta_test_grads = backward(add(objective, penalty), ids);
  }

  r.L_total = r.L_dom + r.L_cls + r.L_beta;
  const auto dots = analysis::grad_dot(restrict_to(meta_train_grads, theta),
                                       restrict_to(meta_test_grads, theta), model.groups);
  r.grad_dot_per_group = dots.per_group;
  r.grad_dot_total = dots.total;
  r.grad_cos = dots.cosine;
  r.grads = add_gradients(meta_train_grads, meta_test_grads);
  return r;
}

StepReport metaalign_step(nn::ModelBundle& model, const data::PairedBatch& batch,
                          const losses::AlignmentVariant& variant, OptimState& state, Role role,
                          const StepContext& ctx) {
  StepReport r = compute_metaalign(model, batch, variant, state.config().alpha, role, ctx);
  check_finite(r, ctx.iteration);
  sgd_update(model.params, r.grads, state);
  return r;
}

}  // namespace metaalign::optim
