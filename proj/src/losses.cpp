#include "metaalign/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "metaalign/errors.hpp"

namespace metaalign::losses {

AlignmentKind parse_alignment_kind(const std::string& name) {
  if (name == "DANN") return AlignmentKind::dann;
  if (name == "DANNPE") return AlignmentKind::dannpe;
  if (name == "MMD") return AlignmentKind::mmd;
  throw ContractError("unknown alignment variant: " + name);
}

std::string to_string(AlignmentKind kind) {
  switch (kind) {
    case AlignmentKind::dann: return "DANN";
    case AlignmentKind::dannpe: return "DANNPE";
    case AlignmentKind::mmd: return "MMD";
  }
  return "?";
}

void validate(const AlignmentVariant& variant) {
  if (!std::isfinite(variant.lambda) || variant.lambda < 0.0) {
    throw ContractError("alignment lambda must be finite and nonnegative");
  }
  if (variant.kind == AlignmentKind::mmd && !(variant.sigma > 0.0 && std::isfinite(variant.sigma))) {
    throw ContractError("MMD bandwidth sigma must be positive");
  }
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  return scale(reduce_mean(pick(log_softmax(logits), labels)), -1.0);
}

namespace {

Tensor normalized_weights(const Tensor& w, std::size_t n, const char* which) {
  if (w.numel() != n) {
    throw DimensionError(std::string("domain_cls_loss: ") + which + " weights have " +
                         std::to_string(w.numel()) + " entries for " + std::to_string(n) +
                         " outputs");
  }
  double sum = 0.0;
  for (double v : w.values()) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ContractError(std::string("domain_cls_loss: ") + which + " weights must be nonnegative");
    }
    sum += v;
  }
  if (sum <= 0.0) throw ContractError(std::string("domain_cls_loss: ") + which + " weights sum to 0");
  const double mean = sum / static_cast<double>(n);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = w[i] / mean;
  return Tensor({n, 1}, std::move(out));
}

bool outside(const Tensor& d) {
  return std::any_of(d.values().begin(), d.values().end(),
                     [](double v) { return v < kProbEpsilon || v > 1.0 - kProbEpsilon; });
}

}  // namespace

DomainLoss domain_cls_loss(const Tensor& d_src, const Tensor& d_tgt,
                           const std::optional<Tensor>& w_src, const std::optional<Tensor>& w_tgt) {
  for (const Tensor* d : {&d_src, &d_tgt}) {
    if (d->rank() != 2 || d->cols() != 1) {
      throw DimensionError("domain_cls_loss: expected n x 1 outputs, got " +
                           shape_string(d->shape()));
    }
  }
  const bool clamped = outside(d_src) || outside(d_tgt);
  Tensor log_s = log(clamp(d_src, kProbEpsilon, 1.0 - kProbEpsilon));
  Tensor log_t = log(add_scalar(scale(clamp(d_tgt, kProbEpsilon, 1.0 - kProbEpsilon), -1.0), 1.0));
  if (w_src) log_s = mul(log_s, normalized_weights(*w_src, d_src.rows(), "source"));
  if (w_tgt) log_t = mul(log_t, normalized_weights(*w_tgt, d_tgt.rows(), "target"));
  Tensor value = scale(add(reduce_mean(log_s), reduce_mean(log_t)), -1.0);
  return {std::move(value), clamped};
}

Tensor entropy_weights(const Tensor& probs) {
  if (probs.rank() != 2) {
    throw DimensionError("entropy_weights: expected n x K probabilities, got " +
                         shape_string(probs.shape()));
  }
  const std::size_t n = probs.rows(), k = probs.cols();
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0, h = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = probs[i * k + j];
      if (!(p >= 0.0)) throw DataError("entropy_weights: negative probability in row " + std::to_string(i));
      sum += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::fabs(sum - 1.0) > 1e-6) {
      throw DataError("entropy_weights: row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
    w[i] = std::exp(-h);
  }
  return Tensor({n}, std::move(w));
}

Tensor mmd2_rbf(const Tensor& fs, const Tensor& ft, double sigma) {
  if (!(sigma > 0.0)) throw ContractError("mmd2_rbf: sigma must be positive");
  if (fs.rank() != 2 || ft.rank() != 2) throw DimensionError("mmd2_rbf: expected feature matrices");
  if (fs.cols() != ft.cols()) {
    throw DimensionError("mmd2_rbf: feature widths differ " + shape_string(fs.shape()) + " vs " +
                         shape_string(ft.shape()));
  }
  const double gamma = -1.0 / (2.0 * sigma);
  const Tensor kss = reduce_mean(exp(scale(pairwise_sq_dist(fs, fs), gamma)));
  const Tensor ktt = reduce_mean(exp(scale(pairwise_sq_dist(ft, ft), gamma)));
  const Tensor kst = reduce_mean(exp(scale(pairwise_sq_dist(fs, ft), gamma)));
  return sub(add(kss, ktt), scale(kst, 2.0));
}

double median_sq_distance(const Tensor& fs, const Tensor& ft) {
  std::vector<const double*> rows;
  const std::size_t h = fs.cols();
  for (std::size_t i = 0; i < fs.rows(); ++i) rows.push_back(&fs.values()[i * h]);
  for (std::size_t i = 0; i < ft.rows(); ++i) rows.push_back(&ft.values()[i * h]);
  std::vector<double> d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < h; ++c) {
        const double e = rows[i][c] - rows[j][c];
        s += e * e;
      }
      d.push_back(s);
    }
  }
  if (d.empty()) return 1.0;
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) {
    med = 0.5 * (med + *std::max_element(d.begin(), mid));
  }
  return med > 0.0 && std::isfinite(med) ? med : 1.0;
}

Tensor beta_penalty(const Tensor& beta, double budget) {
  return abs(add_scalar(reduce_sum(beta), -budget));
}

AlignmentTerm alignment_loss(const AlignmentVariant& variant, const AlignmentInputs& in) {
  validate(variant);
  AlignmentTerm term;
  if (variant.kind == AlignmentKind::mmd) {
    Tensor mmd = mmd2_rbf(in.src_features, in.tgt_features, variant.sigma);
    term.dom = mmd.item();
    term.objective = scale(mmd, variant.lambda);
    return term;
  }

  if (!in.model.discriminator) {
    throw ContractError("alignment_loss: adversarial variant needs a domain discriminator");
  }
  const auto& disc = *in.model.discriminator;
  DomainLoss loss;
  if (variant.kind == AlignmentKind::dann) {
    const Tensor ds = nn::discriminate(disc, in.params, nn::grl(in.src_features, variant.lambda),
                                       in.dropout_rng);
    const Tensor dt = nn::discriminate(disc, in.params, nn::grl(in.tgt_features, variant.lambda),
                                       in.dropout_rng);
    loss = domain_cls_loss(ds, dt);
  } else {
    const Tensor ps = softmax(nn::classify(in.model.classifier, in.params, in.src_features));
    const Tensor pt = softmax(nn::classify(in.model.classifier, in.params, in.tgt_features));
    auto weights = in.fixed_weights
                       ? *in.fixed_weights
                       : std::make_pair(entropy_weights(ps), entropy_weights(pt));
    const Tensor ds = nn::discriminate(disc, in.params, nn::grl(ps, variant.lambda), in.dropout_rng);
    const Tensor dt = nn::discriminate(disc, in.params, nn::grl(pt, variant.lambda), in.dropout_rng);
    loss = domain_cls_loss(ds, dt, weights.first, weights.second);
    term.weights = std::move(weights);
  }
  term.dom_cls = loss.value.item();
  term.dom = -*term.dom_cls;
  term.clamped = loss.clamped;
  term.objective = loss.value;
  return term;
}

}  // namespace metaalign::losses
