#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "modicf/numerics/tensor.hpp"

namespace modicf {

struct Triplet {
  std::size_t row;
  std::size_t col;
  Scalar value;
};

// Compressed sparse row matrix; structure is fixed after construction.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  // Duplicate (row, col) entries are summed. Columns within a row end up sorted.
  SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> entries);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t nnz() const { return col_idx_.size(); }

  const std::vector<std::size_t>& row_ptr() const { return row_ptr_; }
  const std::vector<std::size_t>& col_idx() const { return col_idx_; }
  const std::vector<Scalar>& values() const { return values_; }
  std::size_t row_nnz(std::size_t r) const { return row_ptr_[r + 1] - row_ptr_[r]; }

  SparseMatrix transposed() const;
  // out = A * dense
  Tensor multiply(const Tensor& dense) const;
  // out += A^T * dense
  void multiply_transposed_add(const Tensor& dense, Tensor& out) const;
  Tensor to_dense() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<std::size_t> col_idx_;
  std::vector<Scalar> values_;
};

}  // namespace modicf
