#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "modicf/numerics/sparse.hpp"
#include "modicf/numerics/tensor.hpp"

namespace modicf {

class Rng;

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(const ParamId&, const ParamId&) = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  friend bool operator==(const Parameter&, const Parameter&) = default;
};

// Owns every learnable tensor of a model. Models keep ParamIds, so copying a
// store is a full value snapshot of the model.
class ParameterStore {
 public:
  ParamId add(std::string name, Tensor init);
  Parameter& operator[](ParamId id) { return params_.at(id.index); }
  const Parameter& operator[](ParamId id) const { return params_.at(id.index); }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  void zero_grad();

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  ParamId find(const std::string& name) const;

  friend bool operator==(const ParameterStore&, const ParameterStore&) = default;

 private:
  std::vector<Parameter> params_;
};

class Tape;

// Handle to a node in a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return shape().rows; }
  std::size_t cols() const { return shape().cols; }
  bool requires_grad() const;
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Computation record. Nodes are appended in creation order, which is a
// topological order; backward walks them in exact reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Input whose gradient can be read back with grad() after backward.
  Var leaf(Tensor value);
  // Parameter read; gradient is accumulated into store[id].grad on backward.
  Var param(ParameterStore& store, ParamId id);

  void backward(Var loss);
  const Tensor& grad(Var v) const;
  bool consumed() const { return consumed_; }
  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }
  // Order in which the last backward pass visited nodes (for invariants tests).
  const std::vector<std::size_t>& visit_order() const { return visit_order_; }

  // Op-author interface.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn fn);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  // Gradient buffer of a node, allocated (zeroed) on first access.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    ParameterStore* store = nullptr;
    ParamId param{};
  };
  void check_live(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::size_t> visit_order_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

// ---- elementary ops -------------------------------------------------------
// Broadcasting is limited to scalar (1x1) and row vector (1xn) right operands.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Scalar s);
Var add_scalar(Var a, Scalar s);
Var neg(Var a);
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(Var a, Scalar s) { return scale(a, s); }
inline Var operator*(Scalar s, Var a) { return scale(a, s); }
inline Var operator-(Var a) { return neg(a); }

Var sum(Var a);
// axis 0 reduces rows (result 1 x cols); axis 1 reduces columns (result rows x 1).
Var sum(Var a, int axis);
Var mean(Var a);
Var mean(Var a, int axis);
Var sum_squares(Var a);

Var concat(const std::vector<Var>& parts, int axis);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::span<const std::size_t> rows);

// Row-wise softmax.
Var softmax(Var a);
Var sigmoid(Var a);
Var log_sigmoid(Var a);
Var tanh(Var a);
inline constexpr Scalar kLeakySlope = Scalar(0.01);
Var leaky_relu(Var a, Scalar slope = kLeakySlope);

// While alive, records the input sign of every leaky_relu element evaluated on this
// thread. grad_check uses it to skip finite differences that straddle a kink.
class KinkRecorder {
 public:
  KinkRecorder();
  ~KinkRecorder();
  KinkRecorder(const KinkRecorder&) = delete;
  KinkRecorder& operator=(const KinkRecorder&) = delete;

  const std::vector<std::uint8_t>& signs() const { return signs_; }
  static void record(std::span<const Scalar> inputs);

 private:
  std::vector<std::uint8_t> signs_;
  KinkRecorder* previous_;
};
Var exp(Var a);
Var log(Var a);

// Row-wise L2 norm (rows x 1). Zero rows have norm 0 and a zero subgradient.
Var l2_norm(Var a);
// Rows scaled to unit length; zero rows stay zero.
Var normalize_rows(Var a);
// Row-wise cosine similarity between matching rows (rows x 1); zero rows give 0.
Var cosine_similarity(Var a, Var b);
// Mean of squared elementwise differences.
Var mse(Var a, Var b);

// out[i, :] = m[i, :] * col[i, 0]
Var scale_rows(Var m, Var col);
Var spmm(const SparseMatrix& a, Var b);
Var detach(Var a);

// Feature-token cross attention, batched over rows:
// out[b, j] = sum_k softmax_k(q[b, j] * k[b, k] * scale) * v[b, k].
// q is B x n_q, k and v are B x n_k. Every (b, j) attention row sums to one.
Var feature_cross_attention(Var q, Var k, Var v, Scalar scale);
// Attention weights of the op above for a single row b (n_q x n_k), for inspection.
Tensor feature_attention_weights(const Tensor& q, const Tensor& k, std::size_t row, Scalar scale);

// ---- parameter helpers ----------------------------------------------------

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

struct Linear {
  ParamId weight;
  ParamId bias;
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       bool zero_init = false);
  Var operator()(Tape& tape, ParameterStore& store, Var x) const;
};

}  // namespace modicf
