#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "meda/common.hpp"

namespace meda {

// Dense row-major matrix over a configurable scalar width. float is the
// training default; double backs the finite-difference check mode.
template <class S>
struct Mat {
  i64 rows = 0;
  i64 cols = 0;
  std::vector<S> data;  // row-major, rows*cols entries

  Mat() = default;
  Mat(i64 r, i64 c) : rows(r), cols(c), data(static_cast<size_t>(r * c), S(0)) {}

  S& at(i64 r, i64 c) { return data[static_cast<size_t>(r * cols + c)]; }
  S at(i64 r, i64 c) const { return data[static_cast<size_t>(r * cols + c)]; }
  S* row(i64 r) { return data.data() + static_cast<size_t>(r * cols); }
  const S* row(i64 r) const { return data.data() + static_cast<size_t>(r * cols); }
  void fill(S v) { std::fill(data.begin(), data.end(), v); }
  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

// Standard product with a fixed inner k-loop so accumulation order never
// varies between runs.
template <class S>
Mat<S> matmul(const Mat<S>& a, const Mat<S>& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: inner dimensions differ (" + std::to_string(a.cols) +
                     " vs " + std::to_string(b.rows) + ")");
  }
  Mat<S> c(a.rows, b.cols);
  for (i64 i = 0; i < a.rows; ++i) {
    for (i64 j = 0; j < b.cols; ++j) {
      S acc = S(0);
      for (i64 k = 0; k < a.cols; ++k) {
        acc += a.at(i, k) * b.at(k, j);
      }
      c.at(i, j) = acc;
    }
  }
  return c;
}

template <class S>
Mat<S> gather_rows(const Mat<S>& table, std::span<const i64> idx) {
  Mat<S> out(static_cast<i64>(idx.size()), table.cols);
  for (size_t i = 0; i < idx.size(); ++i) {
    const i64 r = idx[i];
    if (r < 0 || r >= table.rows) {
      throw IndexError("gather_rows: index " + std::to_string(r) + " out of range [0, " +
                       std::to_string(table.rows) + ")");
    }
    const S* src = table.row(r);
    S* dst = out.row(static_cast<i64>(i));
    for (i64 c = 0; c < table.cols; ++c) dst[c] = src[c];
  }
  return out;
}

// table[idx[i]] += grads[i], accumulating duplicates in idx order.
template <class S>
void scatter_add_rows(Mat<S>& table, std::span<const i64> idx, const Mat<S>& grads) {
  if (grads.rows != static_cast<i64>(idx.size()) || grads.cols != table.cols) {
    throw ShapeError("scatter_add_rows: grads shape " + std::to_string(grads.rows) + "x" +
                     std::to_string(grads.cols) + " does not match " +
                     std::to_string(idx.size()) + "x" + std::to_string(table.cols));
  }
  for (size_t i = 0; i < idx.size(); ++i) {
    const i64 r = idx[i];
    if (r < 0 || r >= table.rows) {
      throw IndexError("scatter_add_rows: index " + std::to_string(r) +
                       " out of range [0, " + std::to_string(table.rows) + ")");
    }
    S* dst = table.row(r);
    const S* src = grads.row(static_cast<i64>(i));
    for (i64 c = 0; c < table.cols; ++c) dst[c] += src[c];
  }
}

template <class S>
inline S relu(S x) {
  return x > S(0) ? x : S(0);
}

// Overflow-safe logistic: for negative x compute exp(x)/(1+exp(x)) so the
// result underflows gradually instead of overflowing exp(-x).
template <class S>
inline S sigmoid(S x) {
  if (x >= S(0)) {
    return S(1) / (S(1) + std::exp(-x));
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S>
void relu_inplace(std::span<S> v) {
  for (S& x : v) x = relu(x);
}

template <class S>
void sigmoid_inplace(std::span<S> v) {
  for (S& x : v) x = sigmoid(x);
}

}  // namespace meda
