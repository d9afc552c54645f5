#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace flowmix::core {

// Row-major matrix with shared storage. Copies are cheap (shared data);
// values are treated as immutable once a node has been computed.
template <class S>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::shared_ptr<std::vector<S>> store;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), store(std::make_shared<std::vector<S>>(size_t(r) * c, S(0))) {}

  static Mat zeros(int r, int c) { return Mat(r, c); }

  static Mat from_rows(int r, int c, const std::vector<S>& v) {
    if (v.size() != size_t(r) * c) throw std::invalid_argument("Mat::from_rows: size mismatch");
    Mat m(r, c);
    *m.store = v;
    return m;
  }

  template <class U>
  static Mat from_cast(int r, int c, const std::vector<U>& v) {
    if (v.size() != size_t(r) * c) throw std::invalid_argument("Mat::from_cast: size mismatch");
    Mat m(r, c);
    for (size_t i = 0; i < v.size(); ++i) (*m.store)[i] = static_cast<S>(v[i]);
    return m;
  }

  bool empty() const { return !store; }
  size_t size() const { return size_t(rows) * cols; }
  S* data() { return store->data(); }
  const S* data() const { return store->data(); }
  S& at(int r, int c) { return (*store)[size_t(r) * cols + c]; }
  S at(int r, int c) const { return (*store)[size_t(r) * cols + c]; }

  Mat deep_copy() const {
    Mat m(rows, cols);
    *m.store = *store;
    return m;
  }

  bool all_finite() const {
    for (S v : *store)
      if (!std::isfinite(double(v))) return false;
    return true;
  }
};

template <class S>
using ERow = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
Eigen::Map<ERow<S>> emap(Mat<S>& m) {
  return Eigen::Map<ERow<S>>(m.data(), m.rows, m.cols);
}

template <class S>
Eigen::Map<const ERow<S>> emap(const Mat<S>& m) {
  return Eigen::Map<const ERow<S>>(m.data(), m.rows, m.cols);
}

}  // namespace flowmix::core
