#pragma once

#include <Eigen/Core>
#include <vector>

namespace guie {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

/// Ordered set of parameter (or gradient, or moment) tensors.
template <class T>
using TensorList = std::vector<Matrix<T>>;

template <class T>
TensorList<T> zeros_like(const TensorList<T>& ts) {
  TensorList<T> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(Matrix<T>::Zero(t.rows(), t.cols()));
  return out;
}

template <class T>
bool all_finite(const TensorList<T>& ts) {
  for (const auto& t : ts)
    if (!t.allFinite()) return false;
  return true;
}

}  // namespace guie
