#include "modicf/numerics/autograd.hpp"

#include <cmath>
#include <limits>
#include <memory>

#include "modicf/random.hpp"

namespace modicf {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw GraphError("operands recorded on different tapes");
}

enum class Broadcast { kNone, kScalar, kRow };

Broadcast broadcast_kind(const Var& a, const Var& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (b.rows() == 1 && b.cols() == 1) return Broadcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols()) return Broadcast::kRow;
  throw ShapeError(std::string(op) + ": cannot broadcast " + b.shape().str() + " onto " + a.shape().str());
}

// Accumulate g into the gradient of operand `id`, reducing over broadcast axes.
void accumulate_broadcast(Tape& tape, std::size_t id, const Tensor& g, Broadcast kind, Scalar sign) {
  if (!tape.requires_grad(id)) return;
  Tensor& dst = tape.grad_buffer(id);
  switch (kind) {
    case Broadcast::kNone:
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += sign * g[i];
      break;
    case Broadcast::kScalar: {
      double s = 0;
      for (std::size_t i = 0; i < g.size(); ++i) s += g[i];
      dst[0] += sign * static_cast<Scalar>(s);
      break;
    }
    case Broadcast::kRow:
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) dst[c] += sign * g(r, c);
      break;
  }
}

Scalar broadcast_at(const Tensor& b, Broadcast kind, std::size_t r, std::size_t c) {
  switch (kind) {
    case Broadcast::kNone:
      return b(r, c);
    case Broadcast::kScalar:
      return b[0];
    case Broadcast::kRow:
      return b[c];
  }
  return 0;
}

template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai, df](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& xv = t.value(ai);
    const Tensor& yv = t.value(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace

// ---- ParameterStore -------------------------------------------------------

ParamId ParameterStore::add(std::string name, Tensor init) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
  }
  Tensor grad(init.shape());
  params_.push_back(Parameter{std::move(name), std::move(init), std::move(grad)});
  return ParamId{params_.size() - 1};
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.grad.fill(0);
}

ParamId ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return ParamId{i};
  throw std::out_of_range("no parameter named " + name);
}

// ---- Var / Tape -----------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

void Tape::check_live(Var v) const {
  if (&v.tape() != this) throw GraphError("variable belongs to another tape");
  if (consumed_) throw GraphError("tape already consumed by backward()");
}

Var Tape::constant(Tensor value) {
  if (consumed_) throw GraphError("tape already consumed by backward()");
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value) {
  if (consumed_) throw GraphError("tape already consumed by backward()");
  nodes_.push_back(Node{std::move(value), {}, grad_enabled_, {}, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(ParameterStore& store, ParamId id) {
  if (consumed_) throw GraphError("tape already consumed by backward()");
  Node n{store[id].value, {}, grad_enabled_, {}, grad_enabled_ ? &store : nullptr, id};
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(parents), std::move(fn));
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn fn) {
  bool rg = false;
  for (const auto& p : parents) {
    check_live(p);
    rg = rg || nodes_[p.id()].requires_grad;
  }
  rg = rg && grad_enabled_;
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  check_live(loss);
  if (loss.shape() != Shape{1, 1}) throw GraphError("backward() needs a scalar loss, got " + loss.shape().str());
  if (!std::isfinite(loss.value().item())) throw std::domain_error("loss is not finite");
  visit_order_.clear();
  if (nodes_[loss.id()].requires_grad) {
    grad_buffer(loss.id())[0] = 1;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty()) continue;
      visit_order_.push_back(i);
      if (n.backward) n.backward(*this, i);
      if (n.store != nullptr) {
        Tensor& dst = (*n.store)[n.param].grad;
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += n.grad[k];
      }
    }
  }
  // Release saved closures and intermediate gradients; leaf gradients stay readable.
  for (auto& n : nodes_) {
    n.backward = nullptr;
    if (n.store != nullptr) n.grad = Tensor();
  }
  consumed_ = true;
}

const Tensor& Tape::grad(Var v) const {
  if (&v.tape() != this) throw GraphError("variable belongs to another tape");
  const Node& n = nodes_[v.id()];
  if (n.grad.shape() != n.value.shape()) {
    static thread_local Tensor empty;
    empty = Tensor(n.value.shape());
    return empty;
  }
  return n.grad;
}

// ---- linear algebra -------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  Tensor out = matmul(a.value(), b.value());
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    if (t.requires_grad(ai)) {
      Tensor da = matmul(g, transpose(t.value(bi)));
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t i = 0; i < da.size(); ++i) ga[i] += da[i];
    }
    if (t.requires_grad(bi)) {
      Tensor db = matmul(transpose(t.value(ai)), g);
      Tensor& gb = t.grad_buffer(bi);
      for (std::size_t i = 0; i < db.size(); ++i) gb[i] += db[i];
    }
  });
}

Var transpose(Var a) {
  const std::size_t ai = a.id();
  return a.tape().record(transpose(a.value()), {a}, [ai](Tape& t, std::size_t self) {
    Tensor d = transpose(t.grad_buffer(self));
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i];
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  const Broadcast kind = broadcast_kind(a, b, "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) + broadcast_at(y, kind, r, c);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi, kind](Tape& t, std::size_t self) {
    const Tensor g = t.grad_buffer(self);
    accumulate_broadcast(t, ai, g, Broadcast::kNone, 1);
    accumulate_broadcast(t, bi, g, kind, 1);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  const Broadcast kind = broadcast_kind(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) - broadcast_at(y, kind, r, c);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi, kind](Tape& t, std::size_t self) {
    const Tensor g = t.grad_buffer(self);
    accumulate_broadcast(t, ai, g, Broadcast::kNone, 1);
    accumulate_broadcast(t, bi, g, kind, -1);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  const Broadcast kind = broadcast_kind(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) * broadcast_at(y, kind, r, c);
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape().record(std::move(out), {a, b}, [ai, bi, kind](Tape& t, std::size_t self) {
    const Tensor g = t.grad_buffer(self);
    const Tensor& xv = t.value(ai);
    const Tensor& yv = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * broadcast_at(yv, kind, r, c);
    }
    if (t.requires_grad(bi)) {
      Tensor gx(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * xv[i];
      accumulate_broadcast(t, bi, gx, kind, 1);
    }
  });
}

Var scale(Var a, Scalar s) {
  return unary(
      a, [s](Scalar x) { return x * s; }, [s](Scalar, Scalar) { return s; });
}

Var add_scalar(Var a, Scalar s) {
  return unary(
      a, [s](Scalar x) { return x + s; }, [](Scalar, Scalar) { return Scalar(1); });
}

Var neg(Var a) { return scale(a, Scalar(-1)); }

// ---- reductions -----------------------------------------------------------

Var sum(Var a) {
  double s = 0;
  for (Scalar v : a.value().data()) s += v;
  const std::size_t ai = a.id();
  return a.tape().record(Tensor::scalar(static_cast<Scalar>(s)), {a}, [ai](Tape& t, std::size_t self) {
    const Scalar g = t.grad_buffer(self)[0];
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Var sum(Var a, int axis) {
  const Tensor& x = a.value();
  const std::size_t ai = a.id();
  if (axis == 0) {
    std::vector<double> acc(x.cols(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < x.cols(); ++c) acc[c] += x(r, c);
    Tensor out(1, x.cols());
    for (std::size_t c = 0; c < x.cols(); ++c) out[c] = static_cast<Scalar>(acc[c]);
    return a.tape().record(std::move(out), {a}, [ai](Tape& t, std::size_t self) {
      const Tensor& g = t.grad_buffer(self);
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t r = 0; r < ga.rows(); ++r)
        for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g[c];
    });
  }
  if (axis == 1) {
    Tensor out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      double s = 0;
      for (std::size_t c = 0; c < x.cols(); ++c) s += x(r, c);
      out[r] = static_cast<Scalar>(s);
    }
    return a.tape().record(std::move(out), {a}, [ai](Tape& t, std::size_t self) {
      const Tensor& g = t.grad_buffer(self);
      Tensor& ga = t.grad_buffer(ai);
      for (std::size_t r = 0; r < ga.rows(); ++r)
        for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g[r];
    });
  }
  throw std::invalid_argument("sum: axis must be 0 or 1");
}

Var mean(Var a) {
  if (a.value().empty()) throw std::invalid_argument("mean over an empty tensor");
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

Var mean(Var a, int axis) {
  const std::size_t n = axis == 0 ? a.rows() : a.cols();
  if (n == 0) throw std::invalid_argument("mean over an empty axis");
  return scale(sum(a, axis), Scalar(1) / static_cast<Scalar>(n));
}

Var sum_squares(Var a) {
  double s = 0;
  for (Scalar v : a.value().data()) s += static_cast<double>(v) * v;
  const std::size_t ai = a.id();
  return a.tape().record(Tensor::scalar(static_cast<Scalar>(s)), {a}, [ai](Tape& t, std::size_t self) {
    const Scalar g = t.grad_buffer(self)[0];
    const Tensor& x = t.value(ai);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2 * g * x[i];
  });
}

// ---- shape ops ------------------------------------------------------------

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  std::size_t rows = parts[0].rows(), cols = parts[0].cols();
  for (std::size_t k = 1; k < parts.size(); ++k) {
    require_same_tape(parts[0], parts[k]);
    if (axis == 0) {
      if (parts[k].cols() != cols) throw ShapeError("concat rows: column mismatch");
      rows += parts[k].rows();
    } else {
      if (parts[k].rows() != rows) throw ShapeError("concat cols: row mismatch");
      cols += parts[k].cols();
    }
  }
  Tensor out(rows, cols);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    for (std::size_t r = 0; r < v.rows(); ++r)
      for (std::size_t c = 0; c < v.cols(); ++c) {
        if (axis == 0)
          out(off + r, c) = v(r, c);
        else
          out(r, off + c) = v(r, c);
      }
    ids.push_back(p.id());
    offsets.push_back(off);
    off += axis == 0 ? v.rows() : v.cols();
  }
  return parts[0].tape().record(std::move(out), parts, [ids, offsets, axis](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.requires_grad(ids[k])) continue;
      Tensor& gp = t.grad_buffer(ids[k]);
      for (std::size_t r = 0; r < gp.rows(); ++r)
        for (std::size_t c = 0; c < gp.cols(); ++c)
          gp(r, c) += axis == 0 ? g(offsets[k] + r, c) : g(r, offsets[k] + c);
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw ShapeError("slice_rows out of range");
  const Tensor& x = a.value();
  Tensor out(end - begin, x.cols());
  for (std::size_t r = begin; r < end; ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r - begin, c) = x(r, c);
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(begin + r, c) += g(r, c);
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw ShapeError("slice_cols out of range");
  const Tensor& x = a.value();
  Tensor out(x.rows(), end - begin);
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = x(r, c);
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai, begin](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, begin + c) += g(r, c);
  });
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  const Tensor& x = a.value();
  Tensor out(rows.size(), x.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= x.rows()) throw std::out_of_range("gather_rows index out of range");
    for (std::size_t c = 0; c < x.cols(); ++c) out(k, c) = x(rows[k], c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai, idx = std::move(idx)](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t k = 0; k < idx.size(); ++k)
      for (std::size_t c = 0; c < g.cols(); ++c) ga(idx[k], c) += g(k, c);
  });
}

// ---- nonlinearities -------------------------------------------------------

Var softmax(Var a) {
  const Tensor& x = a.value();
  if (x.cols() == 0) throw std::invalid_argument("softmax over an empty row");
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t c = 0; c < x.cols(); ++c) mx = std::max(mx, x(r, c));
    double z = 0;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      out(r, c) = std::exp(x(r, c) - mx);
      z += out(r, c);
    }
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = static_cast<Scalar>(out(r, c) / z);
  }
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dotgy = 0;
      for (std::size_t c = 0; c < y.cols(); ++c) dotgy += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c) ga(r, c) += y(r, c) * (g(r, c) - static_cast<Scalar>(dotgy));
    }
  });
}

Var sigmoid(Var a) {
  return unary(
      a, [](Scalar x) { return sigmoid(x); }, [](Scalar, Scalar y) { return y * (1 - y); });
}

Var log_sigmoid(Var a) {
  // log sigm(x) = -softplus(-x), evaluated stably.
  return unary(
      a,
      [](Scalar x) {
        return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
      },
      [](Scalar x, Scalar) { return Scalar(1) - sigmoid(x); });
}

Var tanh(Var a) {
  return unary(
      a, [](Scalar x) { return std::tanh(x); }, [](Scalar, Scalar y) { return 1 - y * y; });
}

namespace {
thread_local KinkRecorder* active_kink_recorder = nullptr;
}  // namespace

KinkRecorder::KinkRecorder() : previous_(active_kink_recorder) { active_kink_recorder = this; }
KinkRecorder::~KinkRecorder() { active_kink_recorder = previous_; }

void KinkRecorder::record(std::span<const Scalar> inputs) {
  if (!active_kink_recorder) return;
  for (Scalar x : inputs) active_kink_recorder->signs_.push_back(x > 0 ? 1 : 0);
}

Var leaky_relu(Var a, Scalar slope) {
  KinkRecorder::record(a.value().data());
  return unary(
      a, [slope](Scalar x) { return x > 0 ? x : slope * x; },
      [slope](Scalar x, Scalar) { return x > 0 ? Scalar(1) : slope; });
}

Var exp(Var a) {
  return unary(
      a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

Var log(Var a) {
  for (Scalar v : a.value().data()) {
    if (!(v > 0)) throw std::domain_error("log of a non-positive value");
  }
  return unary(
      a, [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return 1 / x; });
}

// ---- norms and similarities ----------------------------------------------

Var l2_norm(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.rows(), 1);
  for (std::size_t r = 0; r < x.rows(); ++r) out[r] = l2_norm(x.row_span(r));
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& n = t.value(self);
    const Tensor& xv = t.value(ai);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t r = 0; r < xv.rows(); ++r) {
      if (n[r] == Scalar(0)) continue;
      for (std::size_t c = 0; c < xv.cols(); ++c) ga(r, c) += g[r] * xv(r, c) / n[r];
    }
  });
}

Var normalize_rows(Var a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  std::vector<Scalar> norms(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    norms[r] = l2_norm(x.row_span(r));
    if (norms[r] == Scalar(0)) continue;
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) / norms[r];
  }
  const std::size_t ai = a.id();
  return a.tape().record(std::move(out), {a}, [ai, norms](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& y = t.value(self);
    Tensor& ga = t.grad_buffer(ai);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      if (norms[r] == Scalar(0)) continue;
      double gy = 0;
      for (std::size_t c = 0; c < y.cols(); ++c) gy += g(r, c) * y(r, c);
      for (std::size_t c = 0; c < y.cols(); ++c)
        ga(r, c) += (g(r, c) - static_cast<Scalar>(gy) * y(r, c)) / norms[r];
    }
  });
}

Var cosine_similarity(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "cosine_similarity");
  return sum(mul(normalize_rows(a), normalize_rows(b)), 1);
}

Var mse(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape(a, b, "mse");
  if (a.value().empty()) throw std::invalid_argument("mse of empty tensors");
  Var d = sub(a, b);
  return scale(sum_squares(d), Scalar(1) / static_cast<Scalar>(a.value().size()));
}

Var scale_rows(Var m, Var col) {
  require_same_tape(m, col);
  if (col.cols() != 1 || col.rows() != m.rows()) {
    throw ShapeError("scale_rows: expected a " + std::to_string(m.rows()) + "x1 column, got " + col.shape().str());
  }
  const Tensor& x = m.value();
  const Tensor& s = col.value();
  Tensor out(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = x(r, c) * s[r];
  const std::size_t mi = m.id(), ci = col.id();
  return m.tape().record(std::move(out), {m, col}, [mi, ci](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& xv = t.value(mi);
    const Tensor& sv = t.value(ci);
    if (t.requires_grad(mi)) {
      Tensor& gm = t.grad_buffer(mi);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gm(r, c) += g(r, c) * sv[r];
    }
    if (t.requires_grad(ci)) {
      Tensor& gc = t.grad_buffer(ci);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        double acc = 0;
        for (std::size_t c = 0; c < g.cols(); ++c) acc += g(r, c) * xv(r, c);
        gc[r] += static_cast<Scalar>(acc);
      }
    }
  });
}

Var spmm(const SparseMatrix& a, Var b) {
  Tensor out = a.multiply(b.value());
  const std::size_t bi = b.id();
  // The sparse matrix is a constant; the tape keeps its own copy.
  auto ap = std::make_shared<const SparseMatrix>(a);
  return b.tape().record(std::move(out), {b}, [ap, bi](Tape& t, std::size_t self) {
    ap->multiply_transposed_add(t.grad_buffer(self), t.grad_buffer(bi));
  });
}

Var detach(Var a) { return a.tape().constant(a.value()); }

Tensor feature_attention_weights(const Tensor& q, const Tensor& k, std::size_t row, Scalar scale) {
  const std::size_t nq = q.cols(), nk = k.cols();
  Tensor w(nq, nk);
  for (std::size_t j = 0; j < nq; ++j) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t c = 0; c < nk; ++c) mx = std::max(mx, q(row, j) * k(row, c) * scale);
    double z = 0;
    for (std::size_t c = 0; c < nk; ++c) {
      w(j, c) = std::exp(q(row, j) * k(row, c) * scale - mx);
      z += w(j, c);
    }
    for (std::size_t c = 0; c < nk; ++c) w(j, c) = static_cast<Scalar>(w(j, c) / z);
  }
  return w;
}

Var feature_cross_attention(Var q, Var k, Var v, Scalar scale) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  require_same_shape(k, v, "feature_cross_attention");
  if (q.rows() != k.rows()) throw ShapeError("feature_cross_attention: batch mismatch");
  if (k.cols() == 0) throw ShapeError("feature_cross_attention: no condition tokens");
  const Tensor& Q = q.value();
  const Tensor& K = k.value();
  const Tensor& V = v.value();
  const std::size_t B = Q.rows(), nq = Q.cols(), nk = K.cols();
  Tensor out(B, nq);
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor w = feature_attention_weights(Q, K, b, scale);
    for (std::size_t j = 0; j < nq; ++j) {
      double acc = 0;
      for (std::size_t c = 0; c < nk; ++c) acc += w(j, c) * V(b, c);
      out(b, j) = static_cast<Scalar>(acc);
    }
  }
  const std::size_t qi = q.id(), ki = k.id(), vi = v.id();
  return q.tape().record(std::move(out), {q, k, v}, [qi, ki, vi, scale](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_buffer(self);
    const Tensor& Qv = t.value(qi);
    const Tensor& Kv = t.value(ki);
    const Tensor& Vv = t.value(vi);
    const Tensor& out = t.value(self);
    const bool gq = t.requires_grad(qi), gk = t.requires_grad(ki), gv = t.requires_grad(vi);
    Tensor* dq = gq ? &t.grad_buffer(qi) : nullptr;
    Tensor* dk = gk ? &t.grad_buffer(ki) : nullptr;
    Tensor* dv = gv ? &t.grad_buffer(vi) : nullptr;
    const std::size_t B = Qv.rows(), nq = Qv.cols(), nk = Kv.cols();
    for (std::size_t b = 0; b < B; ++b) {
      const Tensor w = feature_attention_weights(Qv, Kv, b, scale);
      for (std::size_t j = 0; j < nq; ++j) {
        const Scalar gj = g(b, j);
        if (gj == Scalar(0)) continue;
        for (std::size_t c = 0; c < nk; ++c) {
          const Scalar wjc = w(j, c);
          if (dv) (*dv)(b, c) += gj * wjc;
          // d out / d score_jc = w_jc * (v_c - out_j)
          const Scalar ds = gj * wjc * (Vv(b, c) - out(b, j)) * scale;
          if (dq) (*dq)(b, j) += ds * Kv(b, c);
          if (dk) (*dk)(b, c) += ds * Qv(b, j);
        }
      }
    }
  });
}

// ---- parameter helpers ----------------------------------------------------

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w(fan_in, fan_out);
  for (auto& v : w.data()) v = static_cast<Scalar>(rng.uniform(-bound, bound));
  return w;
}

Linear Linear::create(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                      bool zero_init) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", zero_init ? Tensor(in, out) : xavier_uniform(in, out, rng));
  l.bias = store.add(name + ".bias", Tensor(1, out));
  return l;
}

Var Linear::operator()(Tape& tape, ParameterStore& store, Var x) const {
  return add(matmul(x, tape.param(store, weight)), tape.param(store, bias));
}

}  // namespace modicf
