#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dseg/gemm.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& msg) : Error("integrity error: " + msg) {}
};

// Convolution parameters in conv orientation: weights are (co, ci, kh, kw).
// A conv layer maps ci -> co channels and carries a co-sized bias. A deconv
// layer applies the exact adjoint of the same map, so it runs co -> ci and
// carries a ci-sized bias.
template <class T>
struct ConvParams {
  Tensor<T> weights;
  std::vector<T> bias;
  int stride = 1;
  int pad = 0;

  int64_t out_channels() const { return weights.shape().n; }
  int64_t in_channels() const { return weights.shape().c; }
  int64_t kh() const { return weights.shape().h; }
  int64_t kw() const { return weights.shape().w; }
};

template <class T>
struct LayerGrads {
  Tensor<T> d_input;
  Tensor<T> d_weights;      // conv/deconv only
  std::vector<T> d_bias;    // conv/deconv only
  std::vector<T> d_gamma;   // batchnorm only
  std::vector<T> d_beta;    // batchnorm only
};

// Per-pooled-element flat offsets into the pre-pooling input marking where
// each maximum came from (the switch variables). Ties resolve to the lowest
// linear index, so maps are identical across runs and thread counts.
struct SwitchMap {
  Shape4 shape;                  // equals the pooled output's shape
  std::vector<int64_t> indices;  // flat offsets into the pre-pooling input
};

enum class BnMode { train, infer };

template <class T>
struct BatchNormState {
  std::vector<T> gamma, beta;
  std::vector<T> running_mean, running_var;
  T epsilon = static_cast<T>(1e-5);
  T momentum = static_cast<T>(0.9);  // retention factor of the running average
  BnMode mode = BnMode::train;
  bool initialized = false;  // running statistics recorded at least once

  static BatchNormState identity(int64_t channels) {
    BatchNormState s;
    s.gamma.assign(static_cast<size_t>(channels), T(1));
    s.beta.assign(static_cast<size_t>(channels), T(0));
    s.running_mean.assign(static_cast<size_t>(channels), T(0));
    s.running_var.assign(static_cast<size_t>(channels), T(1));
    return s;
  }
};

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline int64_t deconv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in - 1) * stride + k - 2 * pad;
}

// Lowering works on whole output rows: columns [oy0*ow, (oy0+ny)*ow) of the
// im2col matrix. Row r = (ci*kh + ki)*kw + kj, column j = oy*ow + ox. The
// stride-1 case (every convolution in the table) reduces to contiguous span
// copies per output row.
template <class T>
void im2col_rows(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                 int64_t stride, int64_t pad, int64_t ow, int64_t oy0, int64_t ny, T* col) {
  const int64_t jn = ny * ow;
  for (int64_t ci = 0; ci < c; ++ci) {
    const T* plane = x + ci * h * w;
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((ci * kh + ki) * kw + kj) * jn;
        for (int64_t oy = oy0; oy < oy0 + ny; ++oy) {
          T* dst = row + (oy - oy0) * ow;
          const int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          if (stride == 1) {
            const int64_t xlo = std::max<int64_t>(0, pad - kj);
            const int64_t xhi = std::min<int64_t>(ow, w + pad - kj);
            std::fill(dst, dst + std::min(xlo, ow), T(0));
            if (xhi > xlo)
              std::copy(plane + iy * w + xlo + kj - pad, plane + iy * w + xhi + kj - pad,
                        dst + xlo);
            if (xhi < ow) std::fill(dst + std::max<int64_t>(xhi, 0), dst + ow, T(0));
          } else {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const int64_t ix = ox * stride + kj - pad;
              dst[ox] = (ix >= 0 && ix < w) ? plane[iy * w + ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-add the same row range back into an image plane (adjoint of
// im2col_rows). Overlapping targets: must run single-threaded per plane.
template <class T>
void col2im_rows(const T* col, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                 int64_t stride, int64_t pad, int64_t ow, int64_t oy0, int64_t ny, T* x) {
  const int64_t jn = ny * ow;
  for (int64_t ci = 0; ci < c; ++ci) {
    T* plane = x + ci * h * w;
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((ci * kh + ki) * kw + kj) * jn;
        for (int64_t oy = oy0; oy < oy0 + ny; ++oy) {
          const T* src = row + (oy - oy0) * ow;
          const int64_t iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          if (stride == 1) {
            const int64_t xlo = std::max<int64_t>(0, pad - kj);
            const int64_t xhi = std::min<int64_t>(ow, w + pad - kj);
            T* dst = plane + iy * w + xlo + kj - pad;
            for (int64_t ox = xlo; ox < xhi; ++ox) dst[ox - xlo] += src[ox];
          } else {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const int64_t ix = ox * stride + kj - pad;
              if (ix >= 0 && ix < w) plane[iy * w + ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

// Output rows per lowering chunk, bounded to keep the buffer ~8 MB.
inline int64_t row_chunk(int64_t krows, int64_t ow, int64_t oh) {
  const int64_t budget = (8ll << 20) / static_cast<int64_t>(sizeof(float));
  return std::clamp<int64_t>(budget / std::max<int64_t>(krows * ow, 1), 1, oh);
}

template <class T>
void validate_conv(const Tensor<T>& x, const ConvParams<T>& p, bool is_deconv) {
  const int64_t want_c = is_deconv ? p.out_channels() : p.in_channels();
  if (x.shape().c != want_c)
    throw ShapeError(std::string(is_deconv ? "deconv2d" : "conv2d") + ": input has " +
                     std::to_string(x.shape().c) + " channels, parameters expect " +
                     std::to_string(want_c));
  if (p.kh() < 1 || p.kw() < 1 || p.stride < 1 || p.pad < 0)
    throw ConfigError("bad kernel geometry");
  const int64_t bias_c = is_deconv ? p.in_channels() : p.out_channels();
  if (!p.bias.empty() && static_cast<int64_t>(p.bias.size()) != bias_c)
    throw ShapeError("bias size " + std::to_string(p.bias.size()) + " != channels " +
                     std::to_string(bias_c));
}

}  // namespace detail

template <class T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const ConvParams<T>& p) {
  detail::validate_conv(x, p, false);
  const Shape4 in = x.shape();
  const int64_t co = p.out_channels(), ci = p.in_channels(), kh = p.kh(), kw = p.kw();
  const int64_t oh = detail::conv_out_extent(in.h, kh, p.stride, p.pad);
  const int64_t ow = detail::conv_out_extent(in.w, kw, p.stride, p.pad);
  if (oh < 1 || ow < 1)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " does not fit input " + in.str());
  Tensor<T> y(Shape4(in.n, co, oh, ow));
  const int64_t krows = ci * kh * kw;
  const int64_t cols = oh * ow;
  const bool direct = kh == 1 && kw == 1 && p.stride == 1 && p.pad == 0;
  const int64_t chunk = detail::row_chunk(krows, ow, oh);
  std::vector<T> col;
  if (!direct) col.resize(static_cast<size_t>(krows * chunk * ow));

  for (int64_t n = 0; n < in.n; ++n) {
    const T* xn = x.data() + n * ci * in.h * in.w;
    T* yn = y.data() + n * co * cols;
    if (direct) {
      gemm<T>(false, false, co, cols, ci, T(1), p.weights.data(), krows, xn, cols, T(0),
              yn, cols);
    } else {
      for (int64_t oy0 = 0; oy0 < oh; oy0 += chunk) {
        const int64_t ny = std::min(chunk, oh - oy0);
        detail::im2col_rows(xn, ci, in.h, in.w, kh, kw, p.stride, p.pad, ow, oy0, ny,
                            col.data());
        // y chunk has leading dimension `cols`, the chunk starts at column oy0*ow.
        gemm<T>(false, false, co, ny * ow, krows, T(1), p.weights.data(), krows,
                col.data(), ny * ow, T(0), yn + oy0 * ow, cols);
      }
    }
    if (!p.bias.empty()) {
      for (int64_t oc = 0; oc < co; ++oc) {
        T* row = yn + oc * cols;
        const T b = p.bias[static_cast<size_t>(oc)];
        for (int64_t j = 0; j < cols; ++j) row[j] += b;
      }
    }
  }
  return y;
}

template <class T>
LayerGrads<T> conv2d_backward(const Tensor<T>& x, const ConvParams<T>& p,
                              const Tensor<T>& d_out) {
  detail::validate_conv(x, p, false);
  const Shape4 in = x.shape();
  const int64_t co = p.out_channels(), ci = p.in_channels(), kh = p.kh(), kw = p.kw();
  const int64_t oh = detail::conv_out_extent(in.h, kh, p.stride, p.pad);
  const int64_t ow = detail::conv_out_extent(in.w, kw, p.stride, p.pad);
  if (!(d_out.shape() == Shape4(in.n, co, oh, ow)))
    throw ShapeError("conv2d_backward: d_out " + d_out.shape().str() + " != expected " +
                     Shape4(in.n, co, oh, ow).str());

  LayerGrads<T> g;
  g.d_input = Tensor<T>(in);
  g.d_weights = Tensor<T>(p.weights.shape());
  g.d_bias.assign(static_cast<size_t>(co), T(0));

  const int64_t krows = ci * kh * kw;
  const int64_t cols = oh * ow;
  const bool direct = kh == 1 && kw == 1 && p.stride == 1 && p.pad == 0;
  const int64_t chunk = detail::row_chunk(krows, ow, oh);
  std::vector<T> col, dcol;
  if (!direct) {
    col.resize(static_cast<size_t>(krows * chunk * ow));
    dcol.resize(static_cast<size_t>(krows * chunk * ow));
  }
  // Weight gradient accumulates transposed (krows x co) so the rank-update
  // GEMM gathers over the small d_out operand rather than the lowered matrix.
  std::vector<T> dwt(static_cast<size_t>(krows * co), T(0));
  std::vector<double> bias_acc(static_cast<size_t>(co), 0.0);

  for (int64_t n = 0; n < in.n; ++n) {
    const T* xn = x.data() + n * ci * in.h * in.w;
    const T* dyn = d_out.data() + n * co * cols;
    T* dxn = g.d_input.data() + n * ci * in.h * in.w;
    if (direct) {
      // dW^T += X * dY^T ; dX = W^T * dY
      gemm<T>(false, true, krows, co, cols, T(1), xn, cols, dyn, cols, T(1), dwt.data(),
              co);
      gemm<T>(true, false, ci, cols, co, T(1), p.weights.data(), krows, dyn, cols, T(0),
              dxn, cols);
    } else {
      for (int64_t oy0 = 0; oy0 < oh; oy0 += chunk) {
        const int64_t ny = std::min(chunk, oh - oy0);
        const int64_t jn = ny * ow;
        const int64_t j0 = oy0 * ow;
        detail::im2col_rows(xn, ci, in.h, in.w, kh, kw, p.stride, p.pad, ow, oy0, ny,
                            col.data());
        gemm<T>(false, true, krows, co, jn, T(1), col.data(), jn, dyn + j0, cols, T(1),
                dwt.data(), co);
        gemm<T>(true, false, krows, jn, co, T(1), p.weights.data(), krows, dyn + j0,
                cols, T(0), dcol.data(), jn);
        detail::col2im_rows(dcol.data(), ci, in.h, in.w, kh, kw, p.stride, p.pad, ow,
                            oy0, ny, dxn);
      }
    }
    for (int64_t oc = 0; oc < co; ++oc) {
      const T* row = dyn + oc * cols;
      double acc = 0.0;
      for (int64_t j = 0; j < cols; ++j) acc += static_cast<double>(row[j]);
      bias_acc[static_cast<size_t>(oc)] += acc;
    }
  }
  for (int64_t r = 0; r < krows; ++r)
    for (int64_t oc = 0; oc < co; ++oc)
      g.d_weights[oc * krows + r] = dwt[static_cast<size_t>(r * co + oc)];
  for (int64_t oc = 0; oc < co; ++oc)
    g.d_bias[static_cast<size_t>(oc)] = static_cast<T>(bias_acc[static_cast<size_t>(oc)]);
  return g;
}

// Transposed convolution: the exact adjoint of conv2d_forward with the same
// weights. Maps co -> ci channels; one input activation fans out to a
// kernel-shaped patch of outputs.
template <class T>
Tensor<T> deconv2d_forward(const Tensor<T>& x, const ConvParams<T>& p) {
  detail::validate_conv(x, p, true);
  const Shape4 in = x.shape();
  const int64_t co = p.out_channels(), ci = p.in_channels(), kh = p.kh(), kw = p.kw();
  const int64_t oh = detail::deconv_out_extent(in.h, kh, p.stride, p.pad);
  const int64_t ow = detail::deconv_out_extent(in.w, kw, p.stride, p.pad);
  if (oh < 1 || ow < 1)
    throw ShapeError("deconv2d: pad too large for input " + in.str());
  Tensor<T> y(Shape4(in.n, ci, oh, ow));

  const int64_t krows = ci * kh * kw;
  const int64_t cols = in.h * in.w;  // columns indexed by deconv *input* pixels
  const bool direct = kh == 1 && kw == 1 && p.stride == 1 && p.pad == 0;
  const int64_t chunk = detail::row_chunk(krows, in.w, in.h);
  std::vector<T> col;
  if (!direct) col.resize(static_cast<size_t>(krows * chunk * in.w));

  for (int64_t n = 0; n < in.n; ++n) {
    const T* xn = x.data() + n * co * cols;
    T* yn = y.data() + n * ci * oh * ow;
    if (direct) {
      gemm<T>(true, false, ci, cols, co, T(1), p.weights.data(), krows, xn, cols, T(0),
              yn, cols);
    } else {
      for (int64_t oy0 = 0; oy0 < in.h; oy0 += chunk) {
        const int64_t ny = std::min(chunk, in.h - oy0);
        const int64_t jn = ny * in.w;
        gemm<T>(true, false, krows, jn, co, T(1), p.weights.data(), krows,
                xn + oy0 * in.w, cols, T(0), col.data(), jn);
        detail::col2im_rows(col.data(), ci, oh, ow, kh, kw, p.stride, p.pad, in.w, oy0,
                            ny, yn);
      }
    }
    if (!p.bias.empty()) {
      for (int64_t oc = 0; oc < ci; ++oc) {
        T* row = yn + oc * oh * ow;
        const T b = p.bias[static_cast<size_t>(oc)];
        for (int64_t j = 0; j < oh * ow; ++j) row[j] += b;
      }
    }
  }
  return y;
}

template <class T>
LayerGrads<T> deconv2d_backward(const Tensor<T>& x, const ConvParams<T>& p,
                                const Tensor<T>& d_out) {
  detail::validate_conv(x, p, true);
  const Shape4 in = x.shape();
  const int64_t co = p.out_channels(), ci = p.in_channels(), kh = p.kh(), kw = p.kw();
  const int64_t oh = detail::deconv_out_extent(in.h, kh, p.stride, p.pad);
  const int64_t ow = detail::deconv_out_extent(in.w, kw, p.stride, p.pad);
  if (!(d_out.shape() == Shape4(in.n, ci, oh, ow)))
    throw ShapeError("deconv2d_backward: d_out " + d_out.shape().str() + " != expected " +
                     Shape4(in.n, ci, oh, ow).str());

  LayerGrads<T> g;
  g.d_input = Tensor<T>(in);
  g.d_weights = Tensor<T>(p.weights.shape());
  g.d_bias.assign(static_cast<size_t>(ci), T(0));

  const int64_t krows = ci * kh * kw;
  const int64_t cols = in.h * in.w;
  const bool direct = kh == 1 && kw == 1 && p.stride == 1 && p.pad == 0;
  const int64_t chunk = detail::row_chunk(krows, in.w, in.h);
  std::vector<T> col;
  if (!direct) col.resize(static_cast<size_t>(krows * chunk * in.w));
  std::vector<T> dwt(static_cast<size_t>(krows * co), T(0));
  std::vector<double> bias_acc(static_cast<size_t>(ci), 0.0);

  for (int64_t n = 0; n < in.n; ++n) {
    const T* xn = x.data() + n * co * cols;
    const T* dyn = d_out.data() + n * ci * oh * ow;
    T* dxn = g.d_input.data() + n * co * cols;
    if (direct) {
      gemm<T>(false, false, co, cols, ci, T(1), p.weights.data(), krows, dyn, cols, T(0),
              dxn, cols);
      gemm<T>(false, true, krows, co, cols, T(1), dyn, cols, xn, cols, T(1), dwt.data(),
              co);
    } else {
      for (int64_t oy0 = 0; oy0 < in.h; oy0 += chunk) {
        const int64_t ny = std::min(chunk, in.h - oy0);
        const int64_t jn = ny * in.w;
        const int64_t j0 = oy0 * in.w;
        // d_out lives in the conv-input space; lower it like conv2d does.
        detail::im2col_rows(dyn, ci, oh, ow, kh, kw, p.stride, p.pad, in.w, oy0, ny,
                            col.data());
        gemm<T>(false, false, co, jn, krows, T(1), p.weights.data(), krows, col.data(),
                jn, T(0), dxn + j0, cols);
        gemm<T>(false, true, krows, co, jn, T(1), col.data(), jn, xn + j0, cols, T(1),
                dwt.data(), co);
      }
    }
    for (int64_t oc = 0; oc < ci; ++oc) {
      const T* row = dyn + oc * oh * ow;
      double acc = 0.0;
      for (int64_t j = 0; j < oh * ow; ++j) acc += static_cast<double>(row[j]);
      bias_acc[static_cast<size_t>(oc)] += acc;
    }
  }
  for (int64_t r = 0; r < krows; ++r)
    for (int64_t oc = 0; oc < co; ++oc)
      g.d_weights[oc * krows + r] = dwt[static_cast<size_t>(r * co + oc)];
  for (int64_t oc = 0; oc < ci; ++oc)
    g.d_bias[static_cast<size_t>(oc)] = static_cast<T>(bias_acc[static_cast<size_t>(oc)]);
  return g;
}

// 2x2 stride-2 max pooling, the only geometry the architecture uses.
template <class T>
std::pair<Tensor<T>, SwitchMap> maxpool2d(const Tensor<T>& x) {
  const Shape4 in = x.shape();
  if (in.h % 2 != 0 || in.w % 2 != 0)
    throw ShapeError("maxpool2d: spatial extents must be even, got " + in.str());
  const Shape4 out(in.n, in.c, in.h / 2, in.w / 2);
  Tensor<T> y(out);
  SwitchMap sw{out, std::vector<int64_t>(static_cast<size_t>(out.count()), -1)};

#pragma omp parallel for schedule(static) if (in.n * in.c > 1)
  for (int64_t plane = 0; plane < in.n * in.c; ++plane) {
    const T* xp = x.data() + plane * in.h * in.w;
    T* yp = y.data() + plane * out.h * out.w;
    int64_t* sp = sw.indices.data() + plane * out.h * out.w;
    const int64_t base = plane * in.h * in.w;
    for (int64_t oy = 0; oy < out.h; ++oy) {
      for (int64_t ox = 0; ox < out.w; ++ox) {
        T best = std::numeric_limits<T>::lowest();
        int64_t best_off = -1;
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx) {
            const int64_t off = (oy * 2 + dy) * in.w + (ox * 2 + dx);
            if (best_off < 0 || xp[off] > best) {
              best = xp[off];
              best_off = off;
            }
          }
        yp[oy * out.w + ox] = best;
        sp[oy * out.w + ox] = base + best_off;
      }
    }
  }
  return {std::move(y), std::move(sw)};
}

namespace detail {
// Window integrity: switch i of pooled cell (n,c,oy,ox) must point inside the
// 2x2 window of that cell in the pre-pooling tensor.
inline void check_switch(const SwitchMap& s, const Shape4& pre) {
  const Shape4& ps = s.shape;
  if (pre.n != ps.n || pre.c != ps.c || pre.h != ps.h * 2 || pre.w != ps.w * 2)
    throw ShapeError("maxunpool2d: output shape " + pre.str() +
                     " is not the paired pre-pooling shape of " + ps.str());
  int64_t i = 0;
  for (int64_t n = 0; n < ps.n; ++n)
    for (int64_t c = 0; c < ps.c; ++c)
      for (int64_t oy = 0; oy < ps.h; ++oy)
        for (int64_t ox = 0; ox < ps.w; ++ox, ++i) {
          const int64_t off = s.indices[static_cast<size_t>(i)];
          const int64_t plane = (n * pre.c + c) * pre.h * pre.w;
          const int64_t rel = off - plane;
          if (rel < 0 || rel >= pre.h * pre.w)
            throw IntegrityError("switch " + std::to_string(i) + " outside its plane");
          const int64_t iy = rel / pre.w, ix = rel % pre.w;
          if (iy / 2 != oy || ix / 2 != ox)
            throw IntegrityError("switch " + std::to_string(i) + " outside its window");
        }
}
}  // namespace detail

// Places each pooled activation back at its recorded argmax position; all
// other positions are zero.
template <class T>
Tensor<T> maxunpool2d(const Tensor<T>& y, const SwitchMap& s, const Shape4& out_shape) {
  if (!(y.shape() == s.shape))
    throw ShapeError("maxunpool2d: value shape " + y.shape().str() +
                     " != switch shape " + s.shape.str());
  detail::check_switch(s, out_shape);
  Tensor<T> out(out_shape);
  for (int64_t i = 0; i < y.size(); ++i) out[s.indices[static_cast<size_t>(i)]] = y[i];
  return out;
}

template <class T>
Tensor<T> maxpool2d_backward(const Tensor<T>& d_out, const SwitchMap& s,
                             const Shape4& in_shape) {
  // Routing gradient to the argmax source is exactly unpooling the gradient.
  return maxunpool2d(d_out, s, in_shape);
}

template <class T>
Tensor<T> maxunpool2d_backward(const Tensor<T>& d_out, const SwitchMap& s) {
  detail::check_switch(s, d_out.shape());
  Tensor<T> d_y(s.shape);
  for (int64_t i = 0; i < d_y.size(); ++i) d_y[i] = d_out[s.indices[static_cast<size_t>(i)]];
  return d_y;
}

template <class T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

// Subgradient at exactly 0 is defined as 0.
template <class T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& d_out) {
  detail::check_same_shape(x, d_out, "relu_backward");
  Tensor<T> d(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) d[i] = x[i] > T(0) ? d_out[i] : T(0);
  return d;
}

// Train mode normalizes each channel over (n, h, w) with batch statistics and
// folds the batch into the running averages; infer mode replays the running
// statistics. The caller owns write access to the state (single writer).
template <class T>
Tensor<T> batchnorm_forward(const Tensor<T>& x, BatchNormState<T>& state) {
  const Shape4 in = x.shape();
  const int64_t c = in.c;
  if (static_cast<int64_t>(state.gamma.size()) != c ||
      static_cast<int64_t>(state.beta.size()) != c)
    throw ShapeError("batchnorm: state has " + std::to_string(state.gamma.size()) +
                     " channels, input " + std::to_string(c));
  if (!(state.epsilon > T(0))) throw ConfigError("batchnorm: epsilon must be > 0");
  const int64_t m = in.n * in.h * in.w;
  Tensor<T> y(in);

  if (state.mode == BnMode::train) {
    if (m < 2)
      throw StateError("batchnorm train mode requires batch*h*w >= 2 per channel, got " +
                       std::to_string(m));
    std::vector<T> mean(static_cast<size_t>(c)), var(static_cast<size_t>(c));
#pragma omp parallel for schedule(static) if (c > 1)
    for (int64_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (int64_t n = 0; n < in.n; ++n) {
        const T* p = x.data() + (n * c + ch) * in.plane();
        for (int64_t i = 0; i < in.plane(); ++i) sum += static_cast<double>(p[i]);
      }
      const double mu = sum / static_cast<double>(m);
      double sq = 0.0;
      for (int64_t n = 0; n < in.n; ++n) {
        const T* p = x.data() + (n * c + ch) * in.plane();
        for (int64_t i = 0; i < in.plane(); ++i) {
          const double d = static_cast<double>(p[i]) - mu;
          sq += d * d;
        }
      }
      const double v = sq / static_cast<double>(m);
      mean[static_cast<size_t>(ch)] = static_cast<T>(mu);
      var[static_cast<size_t>(ch)] = static_cast<T>(v);
      const double inv = 1.0 / std::sqrt(v + static_cast<double>(state.epsilon));
      const double g = static_cast<double>(state.gamma[static_cast<size_t>(ch)]);
      const double b = static_cast<double>(state.beta[static_cast<size_t>(ch)]);
      for (int64_t n = 0; n < in.n; ++n) {
        const T* p = x.data() + (n * c + ch) * in.plane();
        T* q = y.data() + (n * c + ch) * in.plane();
        for (int64_t i = 0; i < in.plane(); ++i)
          q[i] = static_cast<T>(g * ((static_cast<double>(p[i]) - mu) * inv) + b);
      }
    }
    if (!state.initialized) {
      state.running_mean = mean;
      state.running_var = var;
      state.initialized = true;
    } else {
      for (int64_t ch = 0; ch < c; ++ch) {
        auto i = static_cast<size_t>(ch);
        state.running_mean[i] =
            state.momentum * state.running_mean[i] + (T(1) - state.momentum) * mean[i];
        state.running_var[i] =
            state.momentum * state.running_var[i] + (T(1) - state.momentum) * var[i];
      }
    }
  } else {
    if (!state.initialized)
      throw StateError("batchnorm infer mode before any statistics were recorded");
#pragma omp parallel for schedule(static) if (c > 1)
    for (int64_t ch = 0; ch < c; ++ch) {
      const auto i = static_cast<size_t>(ch);
      const double inv =
          1.0 / std::sqrt(static_cast<double>(state.running_var[i]) +
                          static_cast<double>(state.epsilon));
      const double mu = static_cast<double>(state.running_mean[i]);
      const double g = static_cast<double>(state.gamma[i]);
      const double b = static_cast<double>(state.beta[i]);
      for (int64_t n = 0; n < in.n; ++n) {
        const T* p = x.data() + (n * c + ch) * in.plane();
        T* q = y.data() + (n * c + ch) * in.plane();
        for (int64_t k = 0; k < in.plane(); ++k)
          q[k] = static_cast<T>(g * ((static_cast<double>(p[k]) - mu) * inv) + b);
      }
    }
  }
  return y;
}

// Backward for train-mode batch normalization, including the coupling of every
// element through the batch statistics. Batch statistics are recomputed from x,
// which reproduces the forward values bit-for-bit.
template <class T>
LayerGrads<T> batchnorm_backward(const Tensor<T>& x, const BatchNormState<T>& state,
                                 const Tensor<T>& d_out) {
  detail::check_same_shape(x, d_out, "batchnorm_backward");
  const Shape4 in = x.shape();
  const int64_t c = in.c;
  const int64_t m = in.n * in.h * in.w;
  if (m < 2) throw StateError("batchnorm backward requires batch*h*w >= 2");

  LayerGrads<T> g;
  g.d_input = Tensor<T>(in);
  g.d_gamma.assign(static_cast<size_t>(c), T(0));
  g.d_beta.assign(static_cast<size_t>(c), T(0));

#pragma omp parallel for schedule(static) if (c > 1)
  for (int64_t ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (int64_t n = 0; n < in.n; ++n) {
      const T* p = x.data() + (n * c + ch) * in.plane();
      for (int64_t i = 0; i < in.plane(); ++i) sum += static_cast<double>(p[i]);
    }
    const double mu = sum / static_cast<double>(m);
    double sq = 0.0;
    for (int64_t n = 0; n < in.n; ++n) {
      const T* p = x.data() + (n * c + ch) * in.plane();
      for (int64_t i = 0; i < in.plane(); ++i) {
        const double d = static_cast<double>(p[i]) - mu;
        sq += d * d;
      }
    }
    const double v = sq / static_cast<double>(m);
    const double inv = 1.0 / std::sqrt(v + static_cast<double>(state.epsilon));
    const double gamma = static_cast<double>(state.gamma[static_cast<size_t>(ch)]);

    // First pass: sums of d_out and d_out * xhat.
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int64_t n = 0; n < in.n; ++n) {
      const T* xp = x.data() + (n * c + ch) * in.plane();
      const T* dp = d_out.data() + (n * c + ch) * in.plane();
      for (int64_t i = 0; i < in.plane(); ++i) {
        const double xhat = (static_cast<double>(xp[i]) - mu) * inv;
        sum_dy += static_cast<double>(dp[i]);
        sum_dy_xhat += static_cast<double>(dp[i]) * xhat;
      }
    }
    g.d_beta[static_cast<size_t>(ch)] = static_cast<T>(sum_dy);
    g.d_gamma[static_cast<size_t>(ch)] = static_cast<T>(sum_dy_xhat);

    const double md = static_cast<double>(m);
    for (int64_t n = 0; n < in.n; ++n) {
      const T* xp = x.data() + (n * c + ch) * in.plane();
      const T* dp = d_out.data() + (n * c + ch) * in.plane();
      T* op = g.d_input.data() + (n * c + ch) * in.plane();
      for (int64_t i = 0; i < in.plane(); ++i) {
        const double xhat = (static_cast<double>(xp[i]) - mu) * inv;
        const double dxhat = static_cast<double>(dp[i]) * gamma;
        op[i] = static_cast<T>(
            inv / md * (md * dxhat - sum_dy * gamma - xhat * sum_dy_xhat * gamma));
      }
    }
  }
  return g;
}

// Centered spatial crop; odd excess gives the extra row/col to bottom/right.
template <class T>
Tensor<T> crop_center(const Tensor<T>& x, const Shape4& target) {
  const Shape4 in = x.shape();
  if (target.n != in.n || target.c != in.c)
    throw ShapeError("crop_center: batch/channel must match");
  if (target.h > in.h || target.w > in.w)
    throw ShapeError("crop_center: target " + target.str() + " larger than input " +
                     in.str());
  const int64_t oy = (in.h - target.h) / 2;
  const int64_t ox = (in.w - target.w) / 2;
  Tensor<T> y(target);
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t c = 0; c < in.c; ++c)
      for (int64_t h = 0; h < target.h; ++h) {
        const T* src = x.data() + ((n * in.c + c) * in.h + (h + oy)) * in.w + ox;
        T* dst = y.data() + ((n * in.c + c) * target.h + h) * target.w;
        std::copy(src, src + target.w, dst);
      }
  return y;
}

// Adjoint of crop_center: zero-pad the gradient back to the original extents.
template <class T>
Tensor<T> uncrop_backward(const Tensor<T>& d_out, const Shape4& original) {
  const Shape4 in = d_out.shape();
  if (original.n != in.n || original.c != in.c)
    throw ShapeError("uncrop_backward: batch/channel must match");
  if (in.h > original.h || in.w > original.w)
    throw ShapeError("uncrop_backward: gradient larger than original");
  const int64_t oy = (original.h - in.h) / 2;
  const int64_t ox = (original.w - in.w) / 2;
  Tensor<T> y(original);
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t c = 0; c < in.c; ++c)
      for (int64_t h = 0; h < in.h; ++h) {
        const T* src = d_out.data() + ((n * in.c + c) * in.h + h) * in.w;
        T* dst = y.data() + ((n * original.c + c) * original.h + (h + oy)) * original.w + ox;
        std::copy(src, src + in.w, dst);
      }
  return y;
}

// Per-pixel channel softmax, max-subtracted for stability.
template <class T>
Tensor<T> softmax_per_pixel(const Tensor<T>& x) {
  const Shape4 in = x.shape();
  if (in.c < 2) throw ShapeError("softmax_per_pixel: needs >= 2 channels");
  Tensor<T> y(in);
  const int64_t plane = in.plane();
#pragma omp parallel for schedule(static) if (in.n * plane > 4096)
  for (int64_t np = 0; np < in.n * plane; ++np) {
    const int64_t n = np / plane;
    const int64_t px = np % plane;
    const T* base = x.data() + n * in.c * plane + px;
    T* out = y.data() + n * in.c * plane + px;
    T mx = base[0];
    for (int64_t c = 1; c < in.c; ++c) mx = std::max(mx, base[c * plane]);
    double sum = 0.0;
    for (int64_t c = 0; c < in.c; ++c) {
      const double e = std::exp(static_cast<double>(base[c * plane] - mx));
      out[c * plane] = static_cast<T>(e);
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int64_t c = 0; c < in.c; ++c)
      out[c * plane] = static_cast<T>(static_cast<double>(out[c * plane]) * inv);
  }
  return y;
}

template <class T>
Tensor<T> softmax_per_pixel_backward(const Tensor<T>& probs, const Tensor<T>& d_out) {
  detail::check_same_shape(probs, d_out, "softmax_backward");
  const Shape4 in = probs.shape();
  Tensor<T> d(in);
  const int64_t plane = in.plane();
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t px = 0; px < plane; ++px) {
      const T* s = probs.data() + n * in.c * plane + px;
      const T* dy = d_out.data() + n * in.c * plane + px;
      T* dx = d.data() + n * in.c * plane + px;
      double inner = 0.0;
      for (int64_t c = 0; c < in.c; ++c)
        inner += static_cast<double>(dy[c * plane]) * static_cast<double>(s[c * plane]);
      for (int64_t c = 0; c < in.c; ++c)
        dx[c * plane] = static_cast<T>(static_cast<double>(s[c * plane]) *
                                       (static_cast<double>(dy[c * plane]) - inner));
    }
  return d;
}

using LabelMask = Tensor<int32_t>;
constexpr int32_t kIgnoreLabel = 255;

// Mean pixel-wise negative log-likelihood over non-ignored pixels; the
// gradient w.r.t. the logits is (softmax - onehot) / count.
template <class T>
std::pair<double, Tensor<T>> cross_entropy_loss(const Tensor<T>& logits,
                                                const LabelMask& labels,
                                                int32_t ignore_label = kIgnoreLabel) {
  const Shape4 in = logits.shape();
  if (labels.shape().n != in.n || labels.shape().h != in.h || labels.shape().w != in.w ||
      labels.shape().c != 1)
    throw ShapeError("cross_entropy_loss: labels " + labels.shape().str() +
                     " do not match logits " + in.str());
  const int64_t plane = in.plane();

  int64_t count = 0;
  for (int64_t i = 0; i < labels.size(); ++i) {
    const int32_t l = labels[i];
    if (l == ignore_label) continue;
    if (l < 0 || l >= in.c)
      throw ShapeError("cross_entropy_loss: label " + std::to_string(l) +
                       " outside [0," + std::to_string(in.c) + ")");
    ++count;
  }
  if (count == 0) throw TrainError("cross_entropy_loss: all pixels ignored");

  Tensor<T> d(in);
  double loss = 0.0;
  const double invc = 1.0 / static_cast<double>(count);
  for (int64_t n = 0; n < in.n; ++n)
    for (int64_t px = 0; px < plane; ++px) {
      const int32_t label = labels[n * plane + px];
      if (label == ignore_label) continue;
      const T* base = logits.data() + n * in.c * plane + px;
      T* dp = d.data() + n * in.c * plane + px;
      double mx = static_cast<double>(base[0]);
      for (int64_t c = 1; c < in.c; ++c)
        mx = std::max(mx, static_cast<double>(base[c * plane]));
      double sum = 0.0;
      for (int64_t c = 0; c < in.c; ++c)
        sum += std::exp(static_cast<double>(base[c * plane]) - mx);
      const double logz = std::log(sum) + mx;
      loss += (logz - static_cast<double>(base[label * plane])) * invc;
      for (int64_t c = 0; c < in.c; ++c) {
        const double p = std::exp(static_cast<double>(base[c * plane]) - logz);
        dp[c * plane] = static_cast<T>((p - (c == label ? 1.0 : 0.0)) * invc);
      }
    }
  return {loss, std::move(d)};
}

// Fixed transposed-convolution kernel performing bilinear interpolation by a
// factor, one channel group each (off-diagonal channel pairs are zero).
// Kernel size is 2*factor - factor%2, stride = factor, pad = (k - factor)/2,
// which maps an h x w map to exactly (h*factor) x (w*factor).
template <class T>
ConvParams<T> bilinear_upsample_kernel(int factor, int64_t channels) {
  if (factor < 1) throw ConfigError("bilinear_upsample_kernel: factor must be >= 1");
  const int64_t k = 2 * factor - factor % 2;
  const double center = static_cast<double>(k - 1) / 2.0;
  std::vector<double> w1(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i)
    w1[static_cast<size_t>(i)] =
        1.0 - std::abs(static_cast<double>(i) - center) / static_cast<double>(factor);

  ConvParams<T> p;
  p.weights = Tensor<T>(Shape4(channels, channels, k, k));
  p.stride = factor;
  p.pad = static_cast<int>((k - factor) / 2);
  p.bias.assign(static_cast<size_t>(channels), T(0));
  for (int64_t ch = 0; ch < channels; ++ch)
    for (int64_t i = 0; i < k; ++i)
      for (int64_t j = 0; j < k; ++j)
        p.weights.at(ch, ch, i, j) =
            static_cast<T>(w1[static_cast<size_t>(i)] * w1[static_cast<size_t>(j)]);
  return p;
}

}  // namespace dseg
