#include "metaalign/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <utility>

#include "metaalign/errors.hpp"

namespace metaalign {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::add_row_bias: return "add_row_bias";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::mul_scalar: return "mul_scalar";
    case OpKind::relu: return "relu";
    case OpKind::tanh: return "tanh";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::abs: return "abs";
    case OpKind::clamp: return "clamp";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::pick: return "pick";
    case OpKind::element: return "element";
    case OpKind::pairwise_sq_dist: return "pairwise_sq_dist";
    case OpKind::gradient_scale: return "gradient_scale";
    case OpKind::concat_flat: return "concat_flat";
    case OpKind::slice: return "slice";
    case OpKind::group_shift: return "group_shift";
  }
  return "unknown";
}

namespace detail {

namespace {
constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();
thread_local std::optional<std::pair<OpKind, double>> g_fault;
}  // namespace

/// Gives a node's backward function write access to its inputs' gradient
/// buffers. Constant inputs get a throwaway scratch buffer.
class Accum {
 public:
  Accum(std::vector<std::vector<double>>& grads, const std::vector<std::size_t>& inputs,
        const std::vector<std::size_t>& input_sizes)
      : grads_(grads), inputs_(inputs), sizes_(input_sizes) {}

  bool wants(std::size_t k) const { return inputs_[k] != kNoNode; }

  std::span<double> at(std::size_t k) {
    if (!wants(k)) {
      scratch_.assign(sizes_[k], 0.0);
      return scratch_;
    }
    auto& g = grads_[inputs_[k]];
    if (g.empty()) g.assign(sizes_[k], 0.0);
    return g;
  }

 private:
  std::vector<std::vector<double>>& grads_;
  const std::vector<std::size_t>& inputs_;
  const std::vector<std::size_t>& sizes_;
  std::vector<double> scratch_;
};

using BackwardFn = std::function<void(std::span<const double> upstream, Accum& acc)>;

struct Node {
  OpKind kind = OpKind::leaf;
  std::vector<std::size_t> inputs;
  std::vector<std::size_t> input_sizes;
  std::size_t numel = 0;
  BackwardFn backward;
  std::optional<ParamId> param;
  Shape leaf_shape;
};

class Tape {
 public:
  std::vector<Node> nodes;
  std::map<ParamId, std::size_t> leaves;
  bool consumed = false;
};

struct Access {
  using Values = std::shared_ptr<const std::vector<double>>;

  static const std::shared_ptr<Tape>& tape(const Tensor& t) { return t.tape_; }
  static std::size_t node(const Tensor& t) { return t.node_; }
  static const Values& values(const Tensor& t) { return t.values_; }

  static Tensor make(Shape shape, Values values, std::shared_ptr<Tape> tape, std::size_t node) {
    return Tensor(std::move(shape), std::move(values), std::move(tape), node);
  }

  /// Builds the result of an op: attaches a node when any input is attached.
  static Tensor result(OpKind kind, Shape shape, std::vector<double> values,
                       std::initializer_list<const Tensor*> inputs, BackwardFn fn) {
    return result(kind, std::move(shape), std::move(values),
                  std::vector<const Tensor*>(inputs), std::move(fn));
  }

  static Tensor result(OpKind kind, Shape shape, std::vector<double> values,
                       const std::vector<const Tensor*>& inputs, BackwardFn fn) {
    std::shared_ptr<Tape> tape;
    for (const Tensor* in : inputs) {
      if (!in->tape_) continue;
      if (in->tape_->consumed) {
        throw ContractError(std::string("stale graph: ") + op_name(kind) +
                            " applied to a tensor whose graph was consumed by backward");
      }
      if (tape && tape != in->tape_) {
        throw ContractError(std::string(op_name(kind)) + ": operands belong to different graphs");
      }
      tape = in->tape_;
    }
    auto vals = std::make_shared<const std::vector<double>>(std::move(values));
    if (!tape) return make(std::move(shape), std::move(vals), nullptr, 0);

    Node node;
    node.kind = kind;
    node.numel = vals->size();
    node.backward = std::move(fn);
    for (const Tensor* in : inputs) {
      node.inputs.push_back(in->tape_ ? in->node_ : kNoNode);
      node.input_sizes.push_back(in->numel());
    }
    tape->nodes.push_back(std::move(node));
    const std::size_t id = tape->nodes.size() - 1;
    return make(std::move(shape), std::move(vals), std::move(tape), id);
  }
};

}  // namespace detail

using detail::Access;
using detail::Accum;

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor() : values_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != values.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive");
  }
  values_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor::Tensor(Shape shape, std::shared_ptr<const std::vector<double>> values,
               std::shared_ptr<detail::Tape> tape, std::size_t node)
    : shape_(std::move(shape)), values_(std::move(values)), tape_(std::move(tape)), node_(node) {}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }
Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows() requires a matrix, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols() requires a matrix, got " + shape_string(shape_));
  return shape_[1];
}

double Tensor::at(std::size_t row, std::size_t col) const { return (*values_)[row * cols() + col]; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return (*values_)[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_->begin(), values_->end(), [](double v) { return std::isfinite(v); });
}

// ---- Graph -----------------------------------------------------------------

Graph::Graph() : tape_(std::make_shared<detail::Tape>()) {}

Tensor Graph::param(const ParamId& id, const Tensor& value) {
  if (tape_->consumed) throw ContractError("stale graph: cannot bind parameters after backward");
  if (tape_->leaves.count(id)) throw ContractError("parameter bound twice: " + id.name);
  detail::Node node;
  node.kind = OpKind::leaf;
  node.numel = value.numel();
  node.param = id;
  node.leaf_shape = value.shape();
  tape_->nodes.push_back(std::move(node));
  const std::size_t nid = tape_->nodes.size() - 1;
  tape_->leaves.emplace(id, nid);
  return Access::make(value.shape(), Access::values(value), tape_, nid);
}

bool Graph::consumed() const { return tape_->consumed; }
std::size_t Graph::size() const { return tape_->nodes.size(); }

// ---- ops -------------------------------------------------------------------

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_matrix(const char* op, const Tensor& x) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(x.shape()));
  }
}

template <typename F>
Tensor unary(OpKind kind, const Tensor& x, F forward,
             std::function<void(std::span<const double>, std::span<const double> in,
                                std::span<const double> out, std::span<double> gx)>
                 grad) {
  std::vector<double> out(x.numel());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xv[i]);
  auto in_vals = Access::values(x);
  auto out_vals = std::make_shared<const std::vector<double>>(out);
  return Access::result(kind, x.shape(), std::move(out), {&x},
                        [in_vals, out_vals, grad](std::span<const double> up, Accum& acc) {
                          grad(up, *in_vals, *out_vals, acc.at(0));
                        });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = &out[i * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[i * k + p];
      const double* brow = &bv[p * n];
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  auto av_s = Access::values(a);
  auto bv_s = Access::values(b);
  return Access::result(
      OpKind::matmul, {m, n}, std::move(out), {&a, &b},
      [av_s, bv_s, m, k, n](std::span<const double> g, Accum& acc) {
        const auto& A = *av_s;
        const auto& B = *bv_s;
        if (acc.wants(0)) {
          // dA = g * B^T
          auto ga = acc.at(0);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double s = 0.0;
              const double* grow = &g[i * n];
              const double* brow = &B[p * n];
              for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
              ga[i * k + p] += s;
            }
          }
        }
        if (acc.wants(1)) {
          // dB = A^T * g
          auto gb = acc.at(1);
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = &g[i * n];
            for (std::size_t p = 0; p < k; ++p) {
              const double s = A[i * k + p];
              double* gbrow = &gb[p * n];
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
            }
          }
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Access::result(OpKind::add, a.shape(), std::move(out), {&a, &b},
                        [](std::span<const double> g, Accum& acc) {
                          for (std::size_t k = 0; k < 2; ++k) {
                            if (!acc.wants(k)) continue;
                            auto gx = acc.at(k);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Access::result(OpKind::sub, a.shape(), std::move(out), {&a, &b},
                        [](std::span<const double> g, Accum& acc) {
                          if (acc.wants(0)) {
                            auto ga = acc.at(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (acc.wants(1)) {
                            auto gb = acc.at(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto av = Access::values(a);
  auto bv = Access::values(b);
  return Access::result(OpKind::mul, a.shape(), std::move(out), {&a, &b},
                        [av, bv](std::span<const double> g, Accum& acc) {
                          if (acc.wants(0)) {
                            auto ga = acc.at(0);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bv)[i];
                          }
                          if (acc.wants(1)) {
                            auto gb = acc.at(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*av)[i];
                          }
                        });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_matrix("add_row_bias", x);
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n || bias.rank() != 1) {
    throw DimensionError("add_row_bias: bias " + shape_string(bias.shape()) +
                         " does not match matrix " + shape_string(x.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  }
  return Access::result(OpKind::add_row_bias, x.shape(), std::move(out), {&x, &bias},
                        [m, n](std::span<const double> g, Accum& acc) {
                          if (acc.wants(0)) {
                            auto gx = acc.at(0);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                          }
                          if (acc.wants(1)) {
                            auto gb = acc.at(1);
                            for (std::size_t i = 0; i < m; ++i) {
                              for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
                            }
                          }
                        });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      OpKind::scale, x, [factor](double v) { return factor * v; },
      [factor](std::span<const double> g, std::span<const double>, std::span<const double>,
               std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
      });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      OpKind::add_scalar, x, [offset](double v) { return v + offset; },
      [](std::span<const double> g, std::span<const double>, std::span<const double>,
         std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      });
}

Tensor mul_scalar(const Tensor& s, const Tensor& x) {
  if (s.numel() != 1) {
    throw DimensionError("mul_scalar: multiplier must hold one value, got " +
                         shape_string(s.shape()));
  }
  const double sv = s.item();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x[i];
  auto xv = Access::values(x);
  return Access::result(OpKind::mul_scalar, x.shape(), std::move(out), {&s, &x},
                        [sv, xv](std::span<const double> g, Accum& acc) {
                          if (acc.wants(0)) {
                            double d = 0.0;
                            for (std::size_t i = 0; i < g.size(); ++i) d += g[i] * (*xv)[i];
                            acc.at(0)[0] += d;
                          }
                          if (acc.wants(1)) {
                            auto gx = acc.at(1);
                            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += sv * g[i];
                          }
                        });
}

Tensor relu(const Tensor& x) {
  return unary(
      OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](std::span<const double> g, std::span<const double> in, std::span<const double>,
         std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (in[i] > 0.0) gx[i] += g[i];
        }
      });
}

Tensor tanh(const Tensor& x) {
  return unary(
      OpKind::tanh, x, [](double v) { return std::tanh(v); },
      [](std::span<const double> g, std::span<const double>, std::span<const double> out,
         std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - out[i] * out[i]);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      OpKind::sigmoid, x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](std::span<const double> g, std::span<const double>, std::span<const double> out,
         std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i] * (1.0 - out[i]);
      });
}

Tensor exp(const Tensor& x) {
  return unary(
      OpKind::exp, x, [](double v) { return std::exp(v); },
      [](std::span<const double> g, std::span<const double>, std::span<const double> out,
         std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * out[i];
      });
}

Tensor log(const Tensor& x) {
  return unary(
      OpKind::log, x, [](double v) { return std::log(v); },
      [](std::span<const double> g, std::span<const double> in, std::span<const double>,
         std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / in[i];
      });
}

Tensor abs(const Tensor& x) {
  return unary(
      OpKind::abs, x, [](double v) { return std::fabs(v); },
      [](std::span<const double> g, std::span<const double> in, std::span<const double>,
         std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (in[i] > 0.0) {
            gx[i] += g[i];
          } else if (in[i] < 0.0) {
            gx[i] -= g[i];
          }
        }
      });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      OpKind::clamp, x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](std::span<const double> g, std::span<const double> in, std::span<const double>,
               std::span<double> gx) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (in[i] >= lo && in[i] <= hi) gx[i] += g[i];
        }
      });
}

Tensor log_softmax(const Tensor& logits) {
  require_matrix("log_softmax", logits);
  const std::size_t n = logits.rows(), k = logits.cols();
  if (k < 2) throw DimensionError("log_softmax: need at least 2 classes");
  std::vector<double> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &logits.values()[i * k];
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = row[j] - lse;
  }
  auto out_vals = std::make_shared<const std::vector<double>>(out);
  return Access::result(OpKind::log_softmax, logits.shape(), std::move(out), {&logits},
                        [out_vals, n, k](std::span<const double> g, Accum& acc) {
                          auto gx = acc.at(0);
                          const auto& y = *out_vals;
                          for (std::size_t i = 0; i < n; ++i) {
                            double gsum = 0.0;
                            for (std::size_t j = 0; j < k; ++j) gsum += g[i * k + j];
                            for (std::size_t j = 0; j < k; ++j) {
                              gx[i * k + j] += g[i * k + j] - std::exp(y[i * k + j]) * gsum;
                            }
                          }
                        });
}

Tensor softmax(const Tensor& logits) { return exp(log_softmax(logits)); }

Tensor reduce_sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Access::result(OpKind::reduce_sum, {}, {s}, {&x},
                        [](std::span<const double> g, Accum& acc) {
                          auto gx = acc.at(0);
                          for (auto& v : gx) v += g[0];
                        });
}

Tensor reduce_mean(const Tensor& x, std::optional<std::size_t> axis) {
  if (!axis) {
    const double n = static_cast<double>(x.numel());
    double s = 0.0;
    for (double v : x.values()) s += v;
    return Access::result(OpKind::reduce_mean, {}, {s / n}, {&x},
                          [n](std::span<const double> g, Accum& acc) {
                            auto gx = acc.at(0);
                            const double share = g[0] / n;
                            for (auto& v : gx) v += share;
                          });
  }
  require_matrix("reduce_mean", x);
  if (*axis > 1) throw DimensionError("reduce_mean: axis must be 0 or 1");
  const std::size_t m = x.rows(), n = x.cols();
  const bool over_rows = *axis == 0;
  const std::size_t out_n = over_rows ? n : m;
  const double count = static_cast<double>(over_rows ? m : n);
  std::vector<double> out(out_n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[over_rows ? j : i] += x[i * n + j];
  }
  for (auto& v : out) v /= count;
  return Access::result(OpKind::reduce_mean, {out_n}, std::move(out), {&x},
                        [m, n, over_rows, count](std::span<const double> g, Accum& acc) {
                          auto gx = acc.at(0);
                          for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t j = 0; j < n; ++j) {
                              gx[i * n + j] += g[over_rows ? j : i] / count;
                            }
                          }
                        });
}

Tensor pick(const Tensor& x, std::span<const int> index) {
  require_matrix("pick", x);
  const std::size_t m = x.rows(), k = x.cols();
  if (index.size() != m) {
    throw DimensionError("pick: " + std::to_string(index.size()) + " indices for " +
                         std::to_string(m) + " rows");
  }
  std::vector<std::size_t> idx(m);
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= k) {
      throw DimensionError("pick: index " + std::to_string(index[i]) + " out of range [0, " +
                           std::to_string(k) + ") at row " + std::to_string(i));
    }
    idx[i] = static_cast<std::size_t>(index[i]);
    out[i] = x[i * k + idx[i]];
  }
  return Access::result(OpKind::pick, {m}, std::move(out), {&x},
                        [idx = std::move(idx), k](std::span<const double> g, Accum& acc) {
                          auto gx = acc.at(0);
                          for (std::size_t i = 0; i < idx.size(); ++i) gx[i * k + idx[i]] += g[i];
                        });
}

Tensor element(const Tensor& x, std::size_t i) {
  if (i >= x.numel()) {
    throw DimensionError("element: index " + std::to_string(i) + " out of range for " +
                         shape_string(x.shape()));
  }
  return Access::result(OpKind::element, {}, {x[i]}, {&x},
                        [i](std::span<const double> g, Accum& acc) { acc.at(0)[i] += g[0]; });
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  require_matrix("pairwise_sq_dist", a);
  require_matrix("pairwise_sq_dist", b);
  const std::size_t n = a.rows(), m = b.rows(), h = a.cols();
  if (b.cols() != h) {
    throw DimensionError("pairwise_sq_dist: feature widths differ " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < h; ++c) {
        const double d = a[i * h + c] - b[j * h + c];
        s += d * d;
      }
      out[i * m + j] = s;
    }
  }
  auto av = Access::values(a);
  auto bv = Access::values(b);
  return Access::result(
      OpKind::pairwise_sq_dist, {n, m}, std::move(out), {&a, &b},
      [av, bv, n, m, h](std::span<const double> g, Accum& acc) {
        const bool want_a = acc.wants(0), want_b = acc.wants(1);
        std::span<double> ga = want_a ? acc.at(0) : std::span<double>{};
        std::span<double> gb = want_b ? acc.at(1) : std::span<double>{};
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < m; ++j) {
            const double w = 2.0 * g[i * m + j];
            if (w == 0.0) continue;
            for (std::size_t c = 0; c < h; ++c) {
              const double d = w * ((*av)[i * h + c] - (*bv)[j * h + c]);
              if (want_a) ga[i * h + c] += d;
              if (want_b) gb[j * h + c] -= d;
            }
          }
        }
      });
}

Tensor gradient_scale(const Tensor& x, double factor) {
  return Access::result(OpKind::gradient_scale, x.shape(),
                        std::vector<double>(x.values().begin(), x.values().end()), {&x},
                        [factor](std::span<const double> g, Accum& acc) {
                          auto gx = acc.at(0);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
                        });
}

Tensor detach(const Tensor& x) { return Access::make(x.shape(), Access::values(x), nullptr, 0); }

Tensor concat_flat(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_flat: nothing to concatenate");
  std::vector<double> out;
  std::vector<const Tensor*> inputs;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
    inputs.push_back(&p);
  }
  const std::size_t total = out.size();
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.numel());
  return Access::result(OpKind::concat_flat, {total}, std::move(out), inputs,
                        [offsets, sizes](std::span<const double> g, Accum& acc) {
                          for (std::size_t k = 0; k < offsets.size(); ++k) {
                            if (!acc.wants(k)) continue;
                            auto gx = acc.at(k);
                            for (std::size_t i = 0; i < sizes[k]; ++i) gx[i] += g[offsets[k] + i];
                          }
                        });
}

Tensor slice(const Tensor& flat, std::size_t offset, Shape shape) {
  const std::size_t count = shape_numel(shape);
  if (offset + count > flat.numel()) {
    throw DimensionError("slice: range [" + std::to_string(offset) + ", " +
                         std::to_string(offset + count) + ") exceeds " +
                         std::to_string(flat.numel()) + " values");
  }
  std::vector<double> out(flat.values().begin() + static_cast<std::ptrdiff_t>(offset),
                          flat.values().begin() + static_cast<std::ptrdiff_t>(offset + count));
  return Access::result(OpKind::slice, std::move(shape), std::move(out), {&flat},
                        [offset](std::span<const double> g, Accum& acc) {
                          auto gx = acc.at(0);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
                        });
}

Tensor group_shift(const Tensor& theta, const Tensor& weights, std::size_t index,
                   const Tensor& direction, double alpha) {
  if (theta.rank() != 1 || direction.rank() != 1 || theta.numel() != direction.numel()) {
    throw DimensionError("group_shift: theta " + shape_string(theta.shape()) +
                         " and direction " + shape_string(direction.shape()) +
                         " must be equal-length vectors");
  }
  if (index >= weights.numel()) {
    throw DimensionError("group_shift: weight index " + std::to_string(index) + " out of range");
  }
  const double w = weights[index];
  std::vector<double> out(theta.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = theta[i] - alpha * w * direction[i];
  auto dir = Access::values(direction);
  return Access::result(OpKind::group_shift, theta.shape(), std::move(out), {&theta, &weights},
                        [dir, index, alpha](std::span<const double> g, Accum& acc) {
                          if (acc.wants(0)) {
                            auto gt = acc.at(0);
                            for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
                          }
                          if (acc.wants(1)) {
                            double dot = 0.0;
                            for (std::size_t i = 0; i < g.size(); ++i) dot += (*dir)[i] * g[i];
                            acc.at(1)[index] += -alpha * dot;
                          }
                        });
}

// ---- differentiation -------------------------------------------------------

std::vector<GradientMap> backward(std::span<const Tensor> losses, const std::set<ParamId>& wanted) {
  if (losses.empty()) throw ContractError("backward: no losses given");
  std::shared_ptr<detail::Tape> tape;
  for (const auto& loss : losses) {
    if (loss.numel() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    }
    const auto& t = Access::tape(loss);
    if (!t) throw ContractError("backward: loss is not attached to a graph");
    if (t->consumed) throw ContractError("backward: stale graph (already consumed)");
    if (tape && tape != t) throw ContractError("backward: losses belong to different graphs");
    tape = t;
  }
  for (const auto& id : wanted) {
    if (!tape->leaves.count(id)) {
      throw ContractError("backward: parameter " + id.name + " is not bound on this graph");
    }
  }

  const auto fault = detail::g_fault;
  std::vector<GradientMap> result;
  for (const auto& loss : losses) {
    const std::size_t root = Access::node(loss);
    std::vector<std::vector<double>> grads(root + 1);
    grads[root] = {1.0};
    for (std::size_t i = root + 1; i-- > 0;) {
      auto& node = tape->nodes[i];
      if (node.kind == OpKind::leaf || grads[i].empty()) continue;
      std::vector<double> upstream = std::move(grads[i]);
      grads[i].clear();
      if (fault && fault->first == node.kind) {
        for (auto& v : upstream) v *= fault->second;
      }
      Accum acc(grads, node.inputs, node.input_sizes);
      node.backward(upstream, acc);
    }
    GradientMap out;
    for (const auto& id : wanted) {
      const std::size_t leaf = tape->leaves.at(id);
      const auto& node = tape->nodes[leaf];
      std::vector<double> g = leaf < grads.size() && !grads[leaf].empty()
                                  ? std::move(grads[leaf])
                                  : std::vector<double>(node.numel, 0.0);
      out.emplace(id, Tensor(node.leaf_shape, std::move(g)));
    }
    result.push_back(std::move(out));
  }
  tape->consumed = true;
  tape->nodes.clear();
  tape->nodes.shrink_to_fit();
  return result;
}

GradientMap backward(const Tensor& loss, const std::set<ParamId>& wanted) {
  return std::move(backward(std::span<const Tensor>(&loss, 1), wanted).front());
}

GradientMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                             const ParamStore& params, const std::set<ParamId>& which, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: step must be positive");
  GradientMap out;
  ParamStore work = params;
  for (const auto& id : which) {
    const auto it = params.find(id);
    if (it == params.end()) throw ContractError("finite_diff_grad: unknown parameter " + id.name);
    const Tensor& base = it->second;
    std::vector<double> grad(base.numel());
    std::vector<double> vals(base.values().begin(), base.values().end());
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      work[id] = Tensor(base.shape(), vals);
      const double fp = f(work);
      vals[i] = orig - h;
      work[id] = Tensor(base.shape(), vals);
      const double fm = f(work);
      vals[i] = orig;
      grad[i] = (fp - fm) / (2.0 * h);
    }
    work[id] = base;
    out.emplace(id, Tensor(base.shape(), std::move(grad)));
  }
  return out;
}

// ---- helpers ---------------------------------------------------------------

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

GradientMap add_gradients(const GradientMap& a, const GradientMap& b) {
  GradientMap out = a;
  for (const auto& [id, g] : b) {
    auto it = out.find(id);
    if (it == out.end()) {
      out.emplace(id, g);
    } else {
      it->second = detach(add(it->second, g));
    }
  }
  return out;
}

std::set<ParamId> ids_of(const ParamStore& params) {
  std::set<ParamId> ids;
  for (const auto& [id, _] : params) ids.insert(id);
  return ids;
}

namespace testing {

ScopedBackwardFault::ScopedBackwardFault(OpKind kind, double factor) : previous_(detail::g_fault) {
  detail::g_fault = std::make_pair(kind, factor);
}

ScopedBackwardFault::~ScopedBackwardFault() { detail::g_fault = previous_; }

}  // namespace testing

}  // namespace metaalign
