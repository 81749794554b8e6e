#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "diffil/errors.hpp"

namespace diffil {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor with value semantics. All training state and all
// autodiff node payloads are Tensors; copies are cheap enough at the scales
// this project runs at.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), v(static_cast<size_t>(shape_numel(shape)), T{0}) {}
  Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int64_t>(v.size()) != shape_numel(shape))
      throw shape_error("tensor data size does not match shape " + shape_str(shape));
  }

  int64_t size() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  // 2-d accessor: [rows, cols]
  T& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * shape[1] + c)]; }
  const T& at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * shape[1] + c)]; }

  // 4-d accessor: [batch, height, width, channels]
  T& at(int64_t b, int64_t h, int64_t w, int64_t c) {
    return v[static_cast<size_t>(((b * shape[1] + h) * shape[2] + w) * shape[3] + c)];
  }
  const T& at(int64_t b, int64_t h, int64_t w, int64_t c) const {
    return v[static_cast<size_t>(((b * shape[1] + h) * shape[2] + w) * shape[3] + c)];
  }

  Tensor<T> reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw shape_error("reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
    return Tensor<T>(std::move(s), v);
  }

  bool finite() const {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }
};

template <typename T>
Tensor<T> zeros(Shape s) {
  return Tensor<T>(std::move(s));
}

template <typename T>
Tensor<T> full(Shape s, T value) {
  Tensor<T> t(std::move(s));
  std::fill(t.v.begin(), t.v.end(), value);
  return t;
}

template <typename T>
Tensor<T> scalar(T value) {
  return Tensor<T>({1}, {value});
}

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape;
}

template <typename T>
void check_shape(const Tensor<T>& t, const Shape& want, const char* what) {
  if (t.shape != want)
    throw shape_error(std::string(what) + ": expected " + shape_str(want) + ", got " + shape_str(t.shape));
}

template <typename T>
void check_rank(const Tensor<T>& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw shape_error(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                      shape_str(t.shape));
}

}  // namespace diffil
