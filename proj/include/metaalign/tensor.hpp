#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
//
// A Graph is a per-step tape. Parameters enter it as named leaves; every op on
// an attached tensor appends a node. backward() consumes the tape, after which
// any tensor still referring to it is stale and rejected by further ops.

#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace metaalign {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct ParamId {
  std::string name;

  friend auto operator<=>(const ParamId&, const ParamId&) = default;
};

namespace detail {
class Tape;
struct Access;
}

enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  add_row_bias,
  scale,
  add_scalar,
  mul_scalar,
  relu,
  tanh,
  sigmoid,
  exp,
  log,
  abs,
  clamp,
  log_softmax,
  reduce_sum,
  reduce_mean,
  pick,
  element,
  pairwise_sq_dist,
  gradient_scale,
  concat_flat,
  slice,
  group_shift,
};

const char* op_name(OpKind kind);

class Tensor {
 public:
  /// Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return values_->size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  std::span<const double> values() const noexcept { return *values_; }
  double operator[](std::size_t i) const { return (*values_)[i]; }
  double at(std::size_t row, std::size_t col) const;
  /// Value of a one-element tensor.
  double item() const;

  bool attached() const noexcept { return tape_ != nullptr; }
  bool all_finite() const;

 private:
  Tensor(Shape shape, std::shared_ptr<const std::vector<double>> values,
         std::shared_ptr<detail::Tape> tape, std::size_t node);

  Shape shape_;
  std::shared_ptr<const std::vector<double>> values_;
  std::shared_ptr<detail::Tape> tape_;
  std::size_t node_ = 0;

  friend class Graph;
  friend struct detail::Access;
};

/// Parameter id -> gradient, same shape as the parameter.
using GradientMap = std::map<ParamId, Tensor>;

/// Parameter id -> current value.
using ParamStore = std::map<ParamId, Tensor>;

class Graph {
 public:
  Graph();

  /// Registers a parameter leaf. Each id may be bound once per graph.
  Tensor param(const ParamId& id, const Tensor& value);

  bool consumed() const;
  std::size_t size() const;

 private:
  std::shared_ptr<detail::Tape> tape_;
};

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x[m x n] + bias[n], broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// s * x where s holds a single differentiable value.
Tensor mul_scalar(const Tensor& s, const Tensor& x);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
/// Subgradient 0 at the kink.
Tensor abs(const Tensor& x);
/// Gradient passes where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor log_softmax(const Tensor& logits);
Tensor softmax(const Tensor& logits);

Tensor reduce_sum(const Tensor& x);
/// Full mean, or along axis 0/1 of a matrix.
Tensor reduce_mean(const Tensor& x, std::optional<std::size_t> axis = std::nullopt);

/// out[i] = x[i, index[i]].
Tensor pick(const Tensor& x, std::span<const int> index);
/// Scalar view of x[i].
Tensor element(const Tensor& x, std::size_t i);

/// out[i, j] = ||a_i - b_j||^2.
Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);

/// Identity forward; backward multiplies the upstream gradient by factor.
Tensor gradient_scale(const Tensor& x, double factor);

/// Same values, no graph handle.
Tensor detach(const Tensor& x);

Tensor concat_flat(std::span<const Tensor> parts);
Tensor slice(const Tensor& flat, std::size_t offset, Shape shape);

/// out = theta - alpha * weights[index] * direction, with theta and direction
/// flat and equally sized. direction is treated as a constant. Backward sends
/// the upstream gradient u to theta unchanged and -alpha * <u, direction> to
/// weights[index], the dot accumulated sequentially in element order.
Tensor group_shift(const Tensor& theta, const Tensor& weights, std::size_t index,
                   const Tensor& direction, double alpha);

// ---- differentiation -------------------------------------------------------

/// Reverse accumulation from a one-element loss. Every wanted id must be bound
/// as a leaf on the loss's graph; unreached leaves get zero gradients. The
/// graph is consumed.
GradientMap backward(const Tensor& loss, const std::set<ParamId>& wanted);

/// One reverse sweep per loss over a shared graph, consumed once at the end.
std::vector<GradientMap> backward(std::span<const Tensor> losses, const std::set<ParamId>& wanted);

/// Central differences (f(p+h) - f(p-h)) / 2h per scalar coordinate of the
/// selected parameters.
GradientMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                             const ParamStore& params, const std::set<ParamId>& which,
                             double h = 1e-5);

// ---- helpers on plain values ----------------------------------------------

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double s, const Tensor& x);

GradientMap add_gradients(const GradientMap& a, const GradientMap& b);
std::set<ParamId> ids_of(const ParamStore& params);

namespace testing {

/// While alive, backward of ops of the given kind multiplies the gradients
/// it emits by factor. Used only to prove the gradient checker catches faults.
class ScopedBackwardFault {
 public:
  ScopedBackwardFault(OpKind kind, double factor);
  ~ScopedBackwardFault();
  ScopedBackwardFault(const ScopedBackwardFault&) = delete;
  ScopedBackwardFault& operator=(const ScopedBackwardFault&) = delete;

 private:
  std::optional<std::pair<OpKind, double>> previous_;
};

}  // namespace testing

}  // namespace metaalign
