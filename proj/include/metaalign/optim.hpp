#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "metaalign/analysis.hpp"
#include "metaalign/data.hpp"
#include "metaalign/losses.hpp"
#include "metaalign/nn.hpp"
#include "metaalign/tensor.hpp"

namespace metaalign::optim {

struct OptimConfig {
  /// Outer learning rate (eta).
  double lr = 0.01;
  /// Meta learning rate of the virtual update.
  double alpha = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

void validate(const OptimConfig& config);

/// Momentum SGD state shared by every parameter set, including the group weights.
class OptimState {
 public:
  explicit OptimState(OptimConfig config);

  const OptimConfig& config() const { return config_; }
  /// Parameters exempt from weight decay.
  std::set<ParamId> no_decay;
  std::map<ParamId, std::vector<double>> velocity;

 private:
  OptimConfig config_;
};

/// v <- mu v + (g + wd p); p <- p - lr v, for every parameter in grads.
void sgd_update(ParamStore& params, const GradientMap& grads, OptimState& state);

enum class Task { alignment, classification };

struct Role {
  Task meta_train = Task::alignment;

  Task meta_test() const {
    return meta_train == Task::alignment ? Task::classification : Task::alignment;
  }
  bool operator==(const Role&) const = default;
};

enum class RolePolicy { align_train, cls_train, alternate };

RolePolicy parse_role_policy(const std::string& name);
std::string to_string(RolePolicy policy);
Role role_schedule(RolePolicy policy, std::size_t iteration);

struct StepReport {
  double L_cls = 0.0;
  std::optional<double> L_dom_cls;
  double L_dom = 0.0;
  double L_beta = 0.0;
  double L_total = 0.0;
  std::vector<double> grad_dot_per_group;
  double grad_dot_total = 0.0;
  std::optional<double> grad_cos;
  /// Group weights before the update.
  std::vector<double> beta;
  /// A discriminator output was clamped inside the domain loss.
  bool clamped = false;
  /// Gradient applied by the update.
  GradientMap grads;
};

struct StepContext {
  std::size_t iteration = 0;
  /// Source of dropout masks; no dropout when null.
  Rng* dropout_rng = nullptr;
};

/// Gradients of L_cls + alignment objective at the current parameters. The
/// group weights receive no gradient.
StepReport compute_joint(const nn::ModelBundle& model, const data::PairedBatch& batch,
                         const losses::AlignmentVariant& variant, const StepContext& ctx = {});

/// compute_joint followed by sgd_update.
StepReport joint_step(nn::ModelBundle& model, const data::PairedBatch& batch,
                      const losses::AlignmentVariant& variant, OptimState& state,
                      const StepContext& ctx = {});

/// theta'_m = theta_m - alpha * beta_m * direction_m for each group m. The
/// direction is a constant; backward through theta' reaches theta with unit
/// Jacobian and beta_m with -alpha * <direction_m, upstream_m>.
nn::Bindings virtual_update(const nn::Bindings& theta, const GradientMap& direction, double alpha,
                            const Tensor& beta, const std::vector<std::vector<ParamId>>& groups);

/// First-order meta-step gradients for the given role:
///   phase 1: meta-train loss at theta; its theta gradient, detached, drives
///            the virtual update;
///   phase 2: meta-test loss at theta' plus the budget penalty.
/// The applied gradient is the sum of both phases.
StepReport compute_metaalign(const nn::ModelBundle& model, const data::PairedBatch& batch,
                             const losses::AlignmentVariant& variant, double alpha, Role role,
                             const StepContext& ctx = {});

/// compute_metaalign followed by sgd_update on theta, classifier, discriminator and beta.
StepReport metaalign_step(nn::ModelBundle& model, const data::PairedBatch& batch,
                          const losses::AlignmentVariant& variant, OptimState& state, Role role,
                          const StepContext& ctx = {});

}  // namespace metaalign::optim
