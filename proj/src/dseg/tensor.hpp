#pragma once

#include <algorithm>
#include <cassert>
#include <cstdint>
#include <limits>
#include <vector>

#include "dseg/common.hpp"

namespace dseg {

// Extents of a dense 4-D tensor in batch x channel x height x width order.
struct Shape4 {
  int64_t n = 0, c = 0, h = 0, w = 0;

  Shape4() = default;
  Shape4(int64_t n_, int64_t c_, int64_t h_, int64_t w_) : n(n_), c(c_), h(h_), w(w_) {
    if (n < 1 || c < 1 || h < 1 || w < 1)
      throw ShapeError("all extents must be >= 1, got " + str());
    // Reject products that overflow int64 before they corrupt an allocation.
    const int64_t limit = std::numeric_limits<int64_t>::max();
    int64_t p = n;
    for (int64_t d : {c, h, w}) {
      if (p > limit / d) throw ShapeError("extent product overflows: " + str());
      p *= d;
    }
  }

  int64_t count() const { return n * c * h * w; }
  int64_t plane() const { return h * w; }

  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
           "," + std::to_string(w) + ")";
  }
};

// Dense row-major n->c->h->w tensor. Value semantics; the only in-place
// mutators are the explicitly named ones (fill, scale_add_inplace, data()).
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape4 s) : shape_(s), data_(static_cast<size_t>(s.count()), T(0)) {}
  Tensor(Shape4 s, std::vector<T> values) : shape_(s), data_(std::move(values)) {
    if (static_cast<int64_t>(data_.size()) != shape_.count())
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
  }

  const Shape4& shape() const { return shape_; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  int64_t offset(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(int64_t n, int64_t c, int64_t h, int64_t w) { return data_[offset(n, c, h, w)]; }
  T at(int64_t n, int64_t c, int64_t h, int64_t w) const { return data_[offset(n, c, h, w)]; }
  T& operator[](int64_t i) { return data_[i]; }
  T operator[](int64_t i) const { return data_[i]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (int64_t i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape4 shape_{};  // default-constructed tensor is the empty sentinel
  std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {
template <class T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
}
#ifndef NDEBUG
template <class T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
  assert(t.all_finite() && op);
}
#else
template <class T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif
}  // namespace detail

template <class T>
Tensor<T> zeros(Shape4 s) {
  return Tensor<T>(s);
}

template <class T>
Tensor<T> full(Shape4 s, T v) {
  Tensor<T> t(s);
  t.fill(v);
  return t;
}

// I.i.d. zero-mean Gaussian entries; bit-reproducible per seed.
template <class T>
Tensor<T> gaussian_init(Shape4 s, double stddev, uint64_t seed) {
  if (!(stddev > 0)) throw ConfigError("gaussian_init: stddev must be > 0");
  Tensor<T> t(s);
  Rng rng(seed);
  for (int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(stddev * rng.normal());
  return t;
}

enum class EwOp { add, sub, mul, max };

template <class T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwOp op) {
  detail::check_same_shape(a, b, "elementwise");
  Tensor<T> out(a.shape());
  const int64_t n = a.size();
  switch (op) {
    case EwOp::add:
      for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
      break;
    case EwOp::sub:
      for (int64_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
      break;
    case EwOp::mul:
      for (int64_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
      break;
    case EwOp::max:
      for (int64_t i = 0; i < n; ++i) out[i] = std::max(a[i], b[i]);
      break;
  }
  detail::debug_check_finite(out, "elementwise");
  return out;
}

// accum + alpha * x, fused per element.
template <class T>
Tensor<T> scale_add(const Tensor<T>& accum, const Tensor<T>& x, T alpha) {
  detail::check_same_shape(accum, x, "scale_add");
  Tensor<T> out(accum.shape());
  for (int64_t i = 0; i < accum.size(); ++i) out[i] = accum[i] + alpha * x[i];
  detail::debug_check_finite(out, "scale_add");
  return out;
}

template <class T>
void scale_add_inplace(Tensor<T>& accum, const Tensor<T>& x, T alpha) {
  detail::check_same_shape(accum, x, "scale_add");
  for (int64_t i = 0; i < accum.size(); ++i) accum[i] += alpha * x[i];
}

enum class ReduceOp { sum, mean, max_argmax };

struct Axes4 {
  bool n = false, c = false, h = false, w = false;
  static Axes4 all() { return {true, true, true, true}; }
};

template <class T>
struct ReduceResult {
  Tensor<T> values;
  // Flat offsets of the winning elements, parallel to values; empty unless
  // the op was max_argmax. Ties resolve to the lowest linear index.
  std::vector<int64_t> argmax;
};

// Reduce over the marked axes; reduced extents become 1. Sums accumulate in
// double in ascending index order, so the result is deterministic and equals
// a naive sequential accumulation exactly.
template <class T>
ReduceResult<T> reduce(const Tensor<T>& x, Axes4 axes, ReduceOp op) {
  const Shape4 in = x.shape();
  const Shape4 out_shape(axes.n ? 1 : in.n, axes.c ? 1 : in.c, axes.h ? 1 : in.h,
                         axes.w ? 1 : in.w);
  ReduceResult<T> res;
  res.values = Tensor<T>(out_shape);
  std::vector<double> acc(static_cast<size_t>(out_shape.count()), 0.0);
  std::vector<T> best;
  const bool want_argmax = op == ReduceOp::max_argmax;
  if (want_argmax) {
    best.assign(static_cast<size_t>(out_shape.count()), std::numeric_limits<T>::lowest());
    res.argmax.assign(static_cast<size_t>(out_shape.count()), -1);
  }
  int64_t reduced_count = 1;
  if (axes.n) reduced_count *= in.n;
  if (axes.c) reduced_count *= in.c;
  if (axes.h) reduced_count *= in.h;
  if (axes.w) reduced_count *= in.w;

  int64_t idx = 0;
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t c = 0; c < in.c; ++c)
      for (int64_t h = 0; h < in.h; ++h)
        for (int64_t w = 0; w < in.w; ++w, ++idx) {
          const int64_t o = res.values.offset(axes.n ? 0 : n, axes.c ? 0 : c,
                                              axes.h ? 0 : h, axes.w ? 0 : w);
          if (want_argmax) {
            if (res.argmax[o] < 0 || x[idx] > best[o]) {
              best[o] = x[idx];
              res.argmax[o] = idx;
            }
          } else {
            acc[o] += static_cast<double>(x[idx]);
          }
        }

  if (want_argmax) {
    for (size_t i = 0; i < best.size(); ++i) res.values[static_cast<int64_t>(i)] = best[i];
  } else {
    const double scale = op == ReduceOp::mean ? 1.0 / static_cast<double>(reduced_count) : 1.0;
    for (size_t i = 0; i < acc.size(); ++i)
      res.values[static_cast<int64_t>(i)] = static_cast<T>(acc[i] * scale);
  }
  return res;
}

template <class T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "dot");
  double acc = 0.0;
  for (int64_t i = 0; i < a.size(); ++i)
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

}  // namespace dseg
