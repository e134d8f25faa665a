#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "metaalign/rng.hpp"
#include "metaalign/tensor.hpp"

namespace metaalign::nn {

/// Parameter id -> tensor used by a forward pass. Either graph leaves, virtually
/// updated tensors, or plain constants (evaluation).
using Bindings = std::map<ParamId, Tensor>;

/// Binds every stored parameter as a leaf of the graph.
Bindings bind(Graph& graph, const ParamStore& params);

enum class Activation { relu, tanh };

Activation parse_activation(const std::string& name);
std::string to_string(Activation a);

struct LinearLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  ParamId weight;
  ParamId bias;

  Tensor forward(const Bindings& params, const Tensor& x) const;
};

/// G: linear layers, each followed by the activation.
struct FeatureExtractor {
  std::size_t input_dim = 0;
  std::vector<LinearLayer> layers;
  Activation activation = Activation::relu;

  std::size_t output_dim() const { return layers.empty() ? input_dim : layers.back().out; }
};

/// C: linear layers with ReLU between, ending in num_classes logits.
struct ClassifierHead {
  std::vector<LinearLayer> layers;
  std::size_t num_classes = 0;
};

/// D: three linear layers with ReLU (and optional dropout) between, sigmoid output.
struct DomainDiscriminator {
  std::array<LinearLayer, 3> layers;
  double dropout = 0.0;

  std::size_t input_dim() const { return layers[0].in; }
};

/// Learnable per-group scales of the virtual update, regularized toward a total budget.
struct GroupWeights {
  ParamId id{"beta"};
  std::size_t count = 0;
  double budget = 0.0;
};

enum class DiscriminatorInput { none, features, probabilities };

struct ModelSpec {
  std::size_t input_dim = 2;
  std::vector<std::size_t> hidden{64, 64};
  /// Layer groups of G; defaults to default_group_count(hidden.size()).
  std::optional<std::size_t> groups;
  std::vector<std::size_t> classifier_hidden;
  std::size_t num_classes = 2;
  DiscriminatorInput discriminator_input = DiscriminatorInput::features;
  std::size_t discriminator_hidden = 32;
  double dropout = 0.0;
  Activation activation = Activation::relu;
  /// Budget B; defaults to the group count.
  std::optional<double> budget;
};

/// 4 groups for extractors with at least 4 layers, otherwise min(2, layers).
std::size_t default_group_count(std::size_t layers);

struct ModelBundle {
  FeatureExtractor extractor;
  ClassifierHead classifier;
  std::optional<DomainDiscriminator> discriminator;
  GroupWeights beta;
  std::vector<std::vector<ParamId>> groups;
  ParamStore params;

  std::vector<ParamId> theta_ids() const;
  std::vector<ParamId> classifier_ids() const;
  std::vector<ParamId> discriminator_ids() const;
};

ModelBundle build_model(const ModelSpec& spec);

/// Glorot-uniform weights, zero biases, beta = B / M. Deterministic per seed.
void init_params(ModelBundle& model, std::uint64_t seed);

Tensor extract_features(const FeatureExtractor& g, const Bindings& params, const Tensor& x);
Tensor classify(const ClassifierHead& c, const Bindings& params, const Tensor& features);
/// Dropout masks are drawn from dropout_rng when it is given and dropout > 0.
Tensor discriminate(const DomainDiscriminator& d, const Bindings& params, const Tensor& z,
                    Rng* dropout_rng = nullptr);

/// Gradient reversal: identity forward, upstream gradient times -lambda backward.
Tensor grl(const Tensor& x, double lambda);

/// Contiguous balanced partition of G's layers into m groups; earlier groups
/// take the remainder. Each group lists the weight and bias ids of its layers.
std::vector<std::vector<ParamId>> group_params(const FeatureExtractor& g, std::size_t m);

}  // namespace metaalign::nn
