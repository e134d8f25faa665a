#include "metaalign/nn.hpp"

#include <cmath>
#include <limits>

#include "metaalign/errors.hpp"

namespace metaalign::nn {

Bindings bind(Graph& graph, const ParamStore& params) {
  Bindings out;
  for (const auto& [id, value] : params) out.emplace(id, graph.param(id, value));
  return out;
}

Activation parse_activation(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ContractError("unknown activation: " + name);
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

namespace {

const Tensor& lookup(const Bindings& params, const ParamId& id) {
  const auto it = params.find(id);
  if (it == params.end()) throw ContractError("parameter not bound: " + id.name);
  return it->second;
}

Tensor activate(Activation a, const Tensor& x) { return a == Activation::relu ? relu(x) : tanh(x); }

LinearLayer make_layer(const std::string& prefix, std::size_t index, std::size_t in,
                       std::size_t out) {
  const std::string base = prefix + "." + std::to_string(index);
  return LinearLayer{in, out, ParamId{base + ".weight"}, ParamId{base + ".bias"}};
}

void require_input_width(const char* what, const Tensor& x, std::size_t width) {
  if (x.rank() != 2 || x.cols() != width) {
    throw DimensionError(std::string(what) + ": expected n x " + std::to_string(width) +
                         " input, got " + shape_string(x.shape()));
  }
}

}  // namespace

Tensor LinearLayer::forward(const Bindings& params, const Tensor& x) const {
  return add_row_bias(matmul(x, lookup(params, weight)), lookup(params, bias));
}

std::size_t default_group_count(std::size_t layers) {
  if (layers >= 4) return 4;
  return std::min<std::size_t>(2, layers);
}

std::vector<ParamId> ModelBundle::theta_ids() const {
  std::vector<ParamId> ids;
  for (const auto& l : extractor.layers) {
    ids.push_back(l.weight);
    ids.push_back(l.bias);
  }
  return ids;
}

std::vector<ParamId> ModelBundle::classifier_ids() const {
  std::vector<ParamId> ids;
  for (const auto& l : classifier.layers) {
    ids.push_back(l.weight);
    ids.push_back(l.bias);
  }
  return ids;
}

std::vector<ParamId> ModelBundle::discriminator_ids() const {
  std::vector<ParamId> ids;
  if (!discriminator) return ids;
  for (const auto& l : discriminator->layers) {
    ids.push_back(l.weight);
    ids.push_back(l.bias);
  }
  return ids;
}

ModelBundle build_model(const ModelSpec& spec) {
  if (spec.input_dim == 0) throw ContractError("model: input_dim must be positive");
  if (spec.num_classes < 2) throw ContractError("model: need at least 2 classes");
  ModelBundle m;
  m.extractor.input_dim = spec.input_dim;
  m.extractor.activation = spec.activation;
  std::size_t width = spec.input_dim;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    if (spec.hidden[i] == 0) throw ContractError("model: hidden widths must be positive");
    m.extractor.layers.push_back(make_layer("G", i, width, spec.hidden[i]));
    width = spec.hidden[i];
  }
  const std::size_t feature_dim = width;

  std::size_t cw = feature_dim;
  std::size_t ci = 0;
  for (auto h : spec.classifier_hidden) {
    m.classifier.layers.push_back(make_layer("C", ci++, cw, h));
    cw = h;
  }
  m.classifier.layers.push_back(make_layer("C", ci, cw, spec.num_classes));
  m.classifier.num_classes = spec.num_classes;

  if (spec.discriminator_input != DiscriminatorInput::none) {
    const std::size_t din =
        spec.discriminator_input == DiscriminatorInput::features ? feature_dim : spec.num_classes;
    DomainDiscriminator d;
    d.layers[0] = make_layer("D", 0, din, spec.discriminator_hidden);
    d.layers[1] = make_layer("D", 1, spec.discriminator_hidden, spec.discriminator_hidden);
    d.layers[2] = make_layer("D", 2, spec.discriminator_hidden, 1);
    if (spec.dropout < 0.0 || spec.dropout >= 1.0) {
      throw ContractError("model: dropout must lie in [0, 1)");
    }
    d.dropout = spec.dropout;
    m.discriminator = d;
  }

  const std::size_t layers = m.extractor.layers.size();
  const std::size_t groups = spec.groups.value_or(default_group_count(layers));
  if (layers > 0) m.groups = group_params(m.extractor, groups);
  m.beta.count = m.groups.size();
  m.beta.budget = spec.budget.value_or(static_cast<double>(m.beta.count));

  init_params(m, 0);
  return m;
}

void init_params(ModelBundle& model, std::uint64_t seed) {
  Rng rng(seed);
  auto init_layer = [&](const LinearLayer& l) {
    const double limit = std::sqrt(6.0 / static_cast<double>(l.in + l.out));
    std::vector<double> w(l.in * l.out);
    for (auto& v : w) v = rng.uniform(-limit, limit);
    model.params[l.weight] = Tensor::matrix(l.in, l.out, std::move(w));
    model.params[l.bias] = Tensor::zeros({l.out});
  };
  for (const auto& l : model.extractor.layers) init_layer(l);
  for (const auto& l : model.classifier.layers) init_layer(l);
  if (model.discriminator) {
    for (const auto& l : model.discriminator->layers) init_layer(l);
  }
  if (model.beta.count > 0) {
    model.params[model.beta.id] = Tensor::filled(
        {model.beta.count}, model.beta.budget / static_cast<double>(model.beta.count));
  }
}

Tensor extract_features(const FeatureExtractor& g, const Bindings& params, const Tensor& x) {
  require_input_width("extract_features", x, g.input_dim);
  Tensor h = x;
  for (const auto& layer : g.layers) h = activate(g.activation, layer.forward(params, h));
  return h;
}

Tensor classify(const ClassifierHead& c, const Bindings& params, const Tensor& features) {
  require_input_width("classify", features, c.layers.front().in);
  Tensor h = features;
  for (std::size_t i = 0; i < c.layers.size(); ++i) {
    h = c.layers[i].forward(params, h);
    if (i + 1 < c.layers.size()) h = relu(h);
  }
  return h;
}

Tensor discriminate(const DomainDiscriminator& d, const Bindings& params, const Tensor& z,
                    Rng* dropout_rng) {
  require_input_width("discriminate", z, d.input_dim());
  Tensor h = z;
  for (std::size_t i = 0; i < 2; ++i) {
    h = relu(d.layers[i].forward(params, h));
    if (dropout_rng && d.dropout > 0.0) {
      const double keep = 1.0 - d.dropout;
      std::vector<double> mask(h.numel());
      for (auto& v : mask) v = dropout_rng->uniform() < keep ? 1.0 / keep : 0.0;
      h = mul(h, Tensor(h.shape(), std::move(mask)));
    }
  }
  // Sigmoid rounds to exactly 0 or 1 for large logits; keep the output open.
  return clamp(sigmoid(d.layers[2].forward(params, h)), std::numeric_limits<double>::min(),
               std::nextafter(1.0, 0.0));
}

Tensor grl(const Tensor& x, double lambda) {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw ContractError("grl: lambda must be finite and nonnegative");
  }
  return gradient_scale(x, -lambda);
}

std::vector<std::vector<ParamId>> group_params(const FeatureExtractor& g, std::size_t m) {
  const std::size_t layers = g.layers.size();
  if (m < 1 || m > layers) {
    throw ContractError("group_params: group count " + std::to_string(m) + " outside [1, " +
                        std::to_string(layers) + "]");
  }
  const std::size_t base = layers / m;
  const std::size_t extra = layers % m;
  std::vector<std::vector<ParamId>> groups(m);
  std::size_t layer = 0;
  for (std::size_t gi = 0; gi < m; ++gi) {
    const std::size_t count = base + (gi < extra ? 1 : 0);
    for (std::size_t k = 0; k < count; ++k, ++layer) {
      groups[gi].push_back(g.layers[layer].weight);
      groups[gi].push_back(g.layers[layer].bias);
    }
  }
  return groups;
}

}  // namespace metaalign::nn
