// Copyright 2026 The modalkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "modalkv/error.hpp"

namespace modalkv {

// Dense row-major float matrix.
class Matrix {
public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  void append_row(std::span<const float> values) {
    if (rows_ == 0 && data_.empty() && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) {
      throw ShapeError("row width " + std::to_string(values.size()) + " != " + std::to_string(cols_));
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  // Removes rows listed in `sorted_rows` (strictly ascending), compacting in place.
  void erase_rows(std::span<const std::size_t> sorted_rows) {
    if (sorted_rows.empty()) return;
    std::size_t write = 0;
    std::size_t next = 0;
    for (std::size_t r = 0; r < rows_; ++r) {
      if (next < sorted_rows.size() && sorted_rows[next] == r) {
        ++next;
        continue;
      }
      if (write != r) {
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * cols_), cols_,
                    data_.begin() + static_cast<std::ptrdiff_t>(write * cols_));
      }
      ++write;
    }
    rows_ = write;
    data_.resize(rows_ * cols_);
  }

  bool operator==(const Matrix&) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Strictly ascending list of row/column positions.
class IndexSet {
public:
  IndexSet() = default;
  explicit IndexSet(std::vector<std::size_t> indices) : indices_(std::move(indices)) {
    for (std::size_t i = 1; i < indices_.size(); ++i) {
      if (indices_[i] <= indices_[i - 1]) {
        throw IndexError("index set not strictly ascending at position " + std::to_string(i));
      }
    }
  }
  IndexSet(std::initializer_list<std::size_t> il) : IndexSet(std::vector<std::size_t>(il)) {}

  static IndexSet range(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return IndexSet(std::move(v));
  }

  // Sorts and rejects duplicates.
  static IndexSet from_unsorted(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return IndexSet(std::move(v));
  }

  std::size_t size() const noexcept { return indices_.size(); }
  bool empty() const noexcept { return indices_.empty(); }
  std::size_t operator[](std::size_t i) const noexcept { return indices_[i]; }
  auto begin() const noexcept { return indices_.begin(); }
  auto end() const noexcept { return indices_.end(); }
  std::span<const std::size_t> view() const noexcept { return indices_; }
  const std::vector<std::size_t>& vec() const noexcept { return indices_; }

  bool contains(std::size_t x) const { return std::binary_search(indices_.begin(), indices_.end(), x); }

  void check_bound(std::size_t dim) const {
    if (!indices_.empty() && indices_.back() >= dim) {
      throw IndexError("index " + std::to_string(indices_.back()) + " out of range for dimension " +
                       std::to_string(dim));
    }
  }

  bool operator==(const IndexSet&) const = default;

private:
  std::vector<std::size_t> indices_;
};

// SplitMix64. Identical seeds produce identical streams everywhere.
class Rng64 {
public:
  explicit Rng64(std::uint64_t seed = 0) noexcept : state_(seed) {}

  std::uint64_t next() noexcept {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Top 24 bits as a float in [0, 1), then lo + (hi - lo) * u in float arithmetic.
  float uniform(float lo, float hi) noexcept {
    const float u = static_cast<float>(next() >> 40) * (1.0f / 16777216.0f);
    return lo + (hi - lo) * u;
  }

  std::uint64_t state() const noexcept { return state_; }

private:
  std::uint64_t state_;
};

inline std::pair<std::uint64_t, Rng64> rng_next(Rng64 r) noexcept {
  const std::uint64_t v = r.next();
  return {v, r};
}

struct GemmOptions {
  // Tile width over the selected index dimension; affects speed only.
  std::size_t block = 64;
};

namespace detail {

// out[i][j] = dot(a row i, b row pick(j)), each dot accumulated in ascending k.
// Four output columns are accumulated side by side for instruction-level
// parallelism; each element keeps its own sequential order.
template <class Pick>
void dot_rows_kernel(const Matrix& a, const Matrix& b, std::size_t count, Pick pick, Matrix& out,
                     std::size_t block) {
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  float* od = out.data().data();
  if (block == 0) block = 1;
  for (std::size_t j0 = 0; j0 < count; j0 += block) {
    const std::size_t j1 = std::min(count, j0 + block);
    for (std::size_t i = 0; i < m; ++i) {
      const float* ar = ad + i * k;
      float* orow = od + i * count;
      std::size_t j = j0;
      for (; j + 4 <= j1; j += 4) {
        const float* b0 = bd + pick(j) * k;
        const float* b1 = bd + pick(j + 1) * k;
        const float* b2 = bd + pick(j + 2) * k;
        const float* b3 = bd + pick(j + 3) * k;
        float s0 = 0.0f, s1 = 0.0f, s2 = 0.0f, s3 = 0.0f;
        for (std::size_t p = 0; p < k; ++p) {
          const float av = ar[p];
          s0 += av * b0[p];
          s1 += av * b1[p];
          s2 += av * b2[p];
          s3 += av * b3[p];
        }
        orow[j] = s0;
        orow[j + 1] = s1;
        orow[j + 2] = s2;
        orow[j + 3] = s3;
      }
      for (; j < j1; ++j) {
        const float* br = bd + pick(j) * k;
        float s = 0.0f;
        for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
        orow[j] = s;
      }
    }
  }
}

}  // namespace detail

// a (m x k) * b (k x n), ascending-k accumulation per element.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " * " +
                     std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Matrix out(m, n);
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  float* od = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    float* orow = od + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ad[i * k + p];
      const float* brow = bd + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

// a (m x k) * transpose(b (n x k)).
inline Matrix matmul_nt(const Matrix& a, const Matrix& b, GemmOptions opt = {}) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt inner dims " + std::to_string(a.cols()) + " vs " + std::to_string(b.cols()));
  }
  Matrix out(a.rows(), b.rows());
  detail::dot_rows_kernel(a, b, b.rows(), [](std::size_t j) { return j; }, out, opt.block);
  return out;
}

// Column j of the result is a * (column idx[j] of b). b is read in place.
inline Matrix indexed_gemm_cols(const Matrix& a, const Matrix& b, const IndexSet& idx, GemmOptions opt = {}) {
  if (a.cols() != b.rows()) {
    throw ShapeError("indexed_gemm_cols inner dims " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()));
  }
  idx.check_bound(b.cols());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols(), s = idx.size();
  Matrix out(m, s);
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  const std::size_t* id = idx.view().data();
  float* od = out.data().data();
  const std::size_t block = opt.block ? opt.block : 1;
  for (std::size_t j0 = 0; j0 < s; j0 += block) {
    const std::size_t j1 = std::min(s, j0 + block);
    for (std::size_t i = 0; i < m; ++i) {
      float* orow = od + i * s;
      for (std::size_t p = 0; p < k; ++p) {
        const float av = ad[i * k + p];
        const float* brow = bd + p * n;
        for (std::size_t j = j0; j < j1; ++j) orow[j] += av * brow[id[j]];
      }
    }
  }
  return out;
}

// result[i][j] = dot(a row i, b row idx[j]). b is read in place.
inline Matrix indexed_gemm_rows(const Matrix& a, const Matrix& b, const IndexSet& idx, GemmOptions opt = {}) {
  if (a.cols() != b.cols()) {
    throw ShapeError("indexed_gemm_rows inner dims " + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.cols()));
  }
  idx.check_bound(b.rows());
  Matrix out(a.rows(), idx.size());
  const std::size_t* id = idx.view().data();
  detail::dot_rows_kernel(a, b, idx.size(), [id](std::size_t j) { return id[j]; }, out, opt.block);
  return out;
}

// a (m x |idx|) * (rows idx of b), i.e. the reduction runs over the selected
// rows of b in ascending idx order. Used for probabilities x selected values.
inline Matrix indexed_gemm_inner(const Matrix& a, const Matrix& b, const IndexSet& idx) {
  if (a.cols() != idx.size()) {
    throw ShapeError("indexed_gemm_inner: a has " + std::to_string(a.cols()) + " cols, index set has " +
                     std::to_string(idx.size()));
  }
  idx.check_bound(b.rows());
  const std::size_t m = a.rows(), s = idx.size(), n = b.cols();
  Matrix out(m, n);
  const float* ad = a.data().data();
  const float* bd = b.data().data();
  float* od = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    float* orow = od + i * n;
    for (std::size_t j = 0; j < s; ++j) {
      const float av = ad[i * s + j];
      const float* brow = bd + idx[j] * n;
      for (std::size_t c = 0; c < n; ++c) orow[c] += av * brow[c];
    }
  }
  return out;
}

// Materializes the selected rows of b. This is the slicing path that the
// indexed kernels avoid; kept for benchmarking.
inline Matrix gather_rows(const Matrix& b, const IndexSet& idx) {
  idx.check_bound(b.rows());
  Matrix out(idx.size(), b.cols());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    auto src = b.row(idx[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

// Numerically stable softmax in place (max subtraction, double-precision sum).
inline void softmax_inplace(std::span<float> v) {
  if (v.empty()) throw ShapeError("softmax of empty vector");
  const float mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (float& x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (float& x : v) x = static_cast<float>(static_cast<double>(x) / sum);
}

inline std::vector<float> softmax_row(std::span<const float> logits) {
  std::vector<float> out(logits.begin(), logits.end());
  softmax_inplace(out);
  return out;
}

}  // namespace modalkv
