#include "modicf/numerics/tensor.hpp"

#include <cmath>

namespace modicf {

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul shape mismatch " + a.shape().str() + " x " + b.shape().str());
  }
  Tensor out(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    Scalar* orow = &out(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const Scalar av = a(i, p);
      const Scalar* brow = b.row_span(p).data();
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Scalar dot(std::span<const Scalar> a, std::span<const Scalar> b) {
  if (a.size() != b.size()) throw ShapeError("dot length mismatch");
  Scalar s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Scalar l2_norm(std::span<const Scalar> a) { return std::sqrt(dot(a, a)); }

Scalar cosine(std::span<const Scalar> a, std::span<const Scalar> b) {
  const Scalar na = l2_norm(a), nb = l2_norm(b);
  if (na == Scalar(0) || nb == Scalar(0)) return 0;
  return dot(a, b) / (na * nb);
}

Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace modicf
