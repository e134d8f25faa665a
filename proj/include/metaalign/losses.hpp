#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>

#include "metaalign/nn.hpp"
#include "metaalign/tensor.hpp"

namespace metaalign::losses {

enum class AlignmentKind { dann, dannpe, mmd };

AlignmentKind parse_alignment_kind(const std::string& name);
std::string to_string(AlignmentKind kind);

struct AlignmentVariant {
  AlignmentKind kind = AlignmentKind::dann;
  /// GRL scale for adversarial variants; loss weight for MMD.
  double lambda = 1.0;
  /// RBF bandwidth, MMD only.
  double sigma = 1.0;
};

void validate(const AlignmentVariant& variant);

/// Discriminator outputs are clamped to [kProbEpsilon, 1 - kProbEpsilon] before the log.
inline constexpr double kProbEpsilon = 1e-7;

/// Mean negative log-likelihood of the labelled class.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

struct DomainLoss {
  Tensor value;
  /// Some discriminator output fell outside the clamp range.
  bool clamped = false;
};

/// -mean_s[w log d_s] - mean_t[w log(1 - d_t)]. Weights are constants,
/// rescaled to mean 1 within each domain; absent weights mean all ones.
DomainLoss domain_cls_loss(const Tensor& d_src, const Tensor& d_tgt,
                           const std::optional<Tensor>& w_src = std::nullopt,
                           const std::optional<Tensor>& w_tgt = std::nullopt);

/// exp(-H(p_i)) per row, detached.
Tensor entropy_weights(const Tensor& probs);

/// Biased (V-statistic) squared MMD with kernel exp(-||f - f'||^2 / (2 sigma)).
Tensor mmd2_rbf(const Tensor& fs, const Tensor& ft, double sigma);

/// Median pairwise squared distance over the pooled rows; 1 if degenerate.
double median_sq_distance(const Tensor& fs, const Tensor& ft);

/// |sum(beta) - budget|.
Tensor beta_penalty(const Tensor& beta, double budget);

struct AlignmentInputs {
  const nn::ModelBundle& model;
  const nn::Bindings& params;
  Tensor src_features;
  Tensor tgt_features;
  Rng* dropout_rng = nullptr;
  /// Overrides the entropy weights of the probability-input variant.
  std::optional<std::pair<Tensor, Tensor>> fixed_weights;
};

struct AlignmentTerm {
  /// Scalar to minimize. Adversarial variants apply the discriminator to
  /// grl(input), so minimizing trains D while the extractor receives the
  /// reversed (alignment) gradient.
  Tensor objective;
  /// Domain classification loss, adversarial variants only.
  std::optional<double> dom_cls;
  /// Alignment loss value: -dom_cls for adversarial variants, MMD^2 otherwise.
  double dom = 0.0;
  bool clamped = false;
  /// Entropy weights used (probability-input variant only).
  std::optional<std::pair<Tensor, Tensor>> weights;
};

AlignmentTerm alignment_loss(const AlignmentVariant& variant, const AlignmentInputs& in);

}  // namespace metaalign::losses
