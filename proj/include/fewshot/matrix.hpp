#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fewshot {

// Dense row-major matrix. Deliberately minimal: the numeric kernels in this
// project are all explicit loops, so the type only has to own storage and
// hand out rows.
template <typename T>
struct Matrix {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(size_t r, size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

  T& operator()(size_t r, size_t c) { return data[r * cols + c]; }
  const T& operator()(size_t r, size_t c) const { return data[r * cols + c]; }

  std::span<T> row(size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(size_t r) const { return {data.data() + r * cols, cols}; }

  size_t size() const { return rows * cols; }
  bool empty() const { return size() == 0; }

  bool operator==(const Matrix&) const = default;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

template <typename To, typename From>
Matrix<To> cast_matrix(const Matrix<From>& m) {
  Matrix<To> out(m.rows, m.cols);
  for (size_t i = 0; i < m.data.size(); ++i) out.data[i] = static_cast<To>(m.data[i]);
  return out;
}

}  // namespace fewshot
