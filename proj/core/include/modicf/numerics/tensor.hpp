#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace modicf {

#ifdef MODICF_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
  std::string str() const { return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]"; }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dense row-major matrix. Vectors are 1xn, scalars are 1x1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, Scalar fill = Scalar(0))
      : shape_{rows, cols}, data_(rows * cols, fill) {}
  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : Tensor(shape.rows, shape.cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::vector<Scalar> data) : shape_{rows, cols}, data_(std::move(data)) {
    if (data_.size() != rows * cols) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(Scalar v) { return Tensor(1, 1, v); }
  static Tensor row(std::initializer_list<Scalar> values) {
    return Tensor(1, values.size(), std::vector<Scalar>(values));
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<Scalar>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<Scalar> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged rows in Tensor::from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor(r, c, std::move(data));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar& operator()(std::size_t r, std::size_t c) { return data_[r * shape_.cols + c]; }
  Scalar operator()(std::size_t r, std::size_t c) const { return data_[r * shape_.cols + c]; }
  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  std::span<Scalar> row_span(std::size_t r) { return {data_.data() + r * shape_.cols, shape_.cols}; }
  std::span<const Scalar> row_span(std::size_t r) const { return {data_.data() + r * shape_.cols, shape_.cols}; }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_.str());
    return data_[0];
  }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{};
  std::vector<Scalar> data_;
};

// Plain (non-differentiable) helpers used outside the recorded graph.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Scalar dot(std::span<const Scalar> a, std::span<const Scalar> b);
Scalar l2_norm(std::span<const Scalar> a);
// Cosine similarity with the zero-vector convention: any zero operand gives 0.
Scalar cosine(std::span<const Scalar> a, std::span<const Scalar> b);
Scalar sigmoid(Scalar x);

}  // namespace modicf
