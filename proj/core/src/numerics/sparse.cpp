#include "modicf/numerics/sparse.hpp"

#include <algorithm>
#include <stdexcept>

namespace modicf {

SparseMatrix::SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> entries)
    : rows_(rows), cols_(cols) {
  for (const auto& e : entries) {
    if (e.row >= rows || e.col >= cols) throw std::out_of_range("sparse entry outside matrix bounds");
  }
  std::sort(entries.begin(), entries.end(),
            [](const Triplet& a, const Triplet& b) { return a.row != b.row ? a.row < b.row : a.col < b.col; });
  row_ptr_.assign(rows + 1, 0);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (!col_idx_.empty() && k > 0 && entries[k].row == entries[k - 1].row && entries[k].col == entries[k - 1].col) {
      values_.back() += entries[k].value;
      continue;
    }
    col_idx_.push_back(entries[k].col);
    values_.push_back(entries[k].value);
    ++row_ptr_[entries[k].row + 1];
  }
  for (std::size_t r = 0; r < rows; ++r) row_ptr_[r + 1] += row_ptr_[r];
}

SparseMatrix SparseMatrix::transposed() const {
  std::vector<Triplet> t;
  t.reserve(nnz());
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) t.push_back({col_idx_[k], r, values_[k]});
  return SparseMatrix(cols_, rows_, std::move(t));
}

Tensor SparseMatrix::multiply(const Tensor& dense) const {
  if (dense.rows() != cols_) throw ShapeError("spmm shape mismatch");
  Tensor out(rows_, dense.cols());
  const std::size_t m = dense.cols();
  for (std::size_t r = 0; r < rows_; ++r) {
    Scalar* o = &out(r, 0);
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      const Scalar v = values_[k];
      const Scalar* d = dense.row_span(col_idx_[k]).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += v * d[j];
    }
  }
  return out;
}

void SparseMatrix::multiply_transposed_add(const Tensor& dense, Tensor& out) const {
  if (dense.rows() != rows_ || out.rows() != cols_ || out.cols() != dense.cols()) {
    throw ShapeError("spmm transpose shape mismatch");
  }
  const std::size_t m = dense.cols();
  for (std::size_t r = 0; r < rows_; ++r) {
    const Scalar* d = dense.row_span(r).data();
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
      const Scalar v = values_[k];
      Scalar* o = &out(col_idx_[k], 0);
      for (std::size_t j = 0; j < m; ++j) o[j] += v * d[j];
    }
  }
}

Tensor SparseMatrix::to_dense() const {
  Tensor out(rows_, cols_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) out(r, col_idx_[k]) += values_[k];
  return out;
}

}  // namespace modicf
