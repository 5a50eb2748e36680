#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "advood/autograd.hpp"
#include "advood/error.hpp"
#include "advood/tensor.hpp"

namespace advood {

// Graph-free numeric kernels. The differentiable ops below call these, and so
// does any code that must reproduce a graph forward pass bit for bit.
namespace kernels {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t n, c, h, w;    // input
  std::size_t k, kh, kw;     // kernel
  std::size_t stride, pad;
  std::size_t oh, ow;        // output
  std::size_t patch() const { return c * kh * kw; }
  std::size_t out_area() const { return oh * ow; }
};

inline ConvGeometry conv_geometry(const Shape& in, const Shape& ker,
                                  std::size_t stride, std::size_t pad) {
  if (in.size() != 4 || ker.size() != 4) {
    throw ShapeError("conv2d expects 4-D input and kernel, got " +
                     shape_string(in) + " and " + shape_string(ker));
  }
  if (ker[1] != in[1]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_string(in) +
                     ", kernel " + shape_string(ker));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be positive");
  ConvGeometry g{in[0], in[1], in[2], in[3], ker[0], ker[2], ker[3],
                 stride, pad, 0, 0};
  const std::size_t ph = g.h + 2 * pad, pw = g.w + 2 * pad;
  if (g.kh > ph || g.kw > pw) {
    throw ShapeError("conv2d kernel " + shape_string(ker) +
                     " larger than padded input " + shape_string(in));
  }
  if ((ph - g.kh) % stride != 0 || (pw - g.kw) % stride != 0) {
    throw ShapeError("conv2d output size not integral for input " +
                     shape_string(in) + " and stride " + std::to_string(stride));
  }
  g.oh = (ph - g.kh) / stride + 1;
  g.ow = (pw - g.kw) / stride + 1;
  return g;
}

// Unfolds one sample (c,h,w) into a (c*kh*kw, oh*ow) row-major matrix.
inline void im2col(const double* img, const ConvGeometry& g, double* col) {
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* dst = col + ((c * g.kh + i) * g.kw + j) * g.out_area();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + j) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.h) && ix >= 0 &&
                                ix < static_cast<long>(g.w);
            dst[y * g.ow + x] =
                inside ? img[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                             static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds a column matrix back into an image.
inline void col2im(const double* col, const ConvGeometry& g, double* img) {
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* src = col + ((c * g.kh + i) * g.kw + j) * g.out_area();
        for (std::size_t y = 0; y < g.oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + i) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t x = 0; x < g.ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + j) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + static_cast<std::size_t>(iy)) * g.w +
                static_cast<std::size_t>(ix)] += src[y * g.ow + x];
          }
        }
      }
    }
  }
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, pad);
  if (bias.size() != g.k) {
    throw ShapeError("conv2d bias has " + std::to_string(bias.size()) +
                     " entries, expected " + std::to_string(g.k));
  }
  Tensor out(Shape{g.n, g.k, g.oh, g.ow});
  RowMatrix col(g.patch(), g.out_area());
  Eigen::Map<const RowMatrix> w(kernel.data().data(), g.k, g.patch());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(input.data().data() + n * g.c * g.h * g.w, g, col.data());
    Eigen::Map<RowMatrix> o(out.data().data() + n * g.k * g.out_area(), g.k,
                            g.out_area());
    o.noalias() = w * col;
    for (std::size_t k = 0; k < g.k; ++k) o.row(k).array() += bias[k];
  }
  return out;
}

// y[n,o] = b[o] + sum_i W[o,i] x[n,i], accumulated in index order.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1) ||
      bias.size() != weight.dim(0)) {
    throw ShapeError("linear shape mismatch: x " + shape_string(x.shape()) +
                     ", W " + shape_string(weight.shape()) + ", b " +
                     shape_string(bias.shape()));
  }
  const std::size_t n = x.dim(0), in = x.dim(1), out = weight.dim(0);
  Tensor y(Shape{n, out});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t o = 0; o < out; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += weight[o * in + i] * x[r * in + i];
      y[r * out + o] = acc + bias[o];
    }
  }
  return y;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects [N,C], got " +
                     shape_string(t.shape()));
  }
}

// Row-wise log-sum-exp with max subtraction.
inline Tensor logsumexp(const Tensor& x) {
  require_matrix(x, "logsumexp");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = x.data().data() + r * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    out[r] = m + std::log(s);
  }
  return out;
}

inline Tensor softmax(const Tensor& x) {
  require_matrix(x, "softmax");
  const std::size_t n = x.dim(0), c = x.dim(1);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = x.data().data() + r * c;
    double* o = out.data().data() + r * c;
    const double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
  }
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& x) {
  require_matrix(x, "argmax_rows");
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<int> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = x.data().data() + r * c;
    out[r] = static_cast<int>(std::max_element(row, row + c) - row);
  }
  return out;
}

}  // namespace kernels

namespace ops {

namespace detail {
inline void require_same_graph(Var a, Var b) {
  if (a.graph != b.graph) throw Error("operands belong to different graphs");
}
inline void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + " shape mismatch: " +
                     shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}
inline void add_into(Tensor& dst, const Tensor& src, double scale = 1.0) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}
}  // namespace detail

inline Var add(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, "add");
  Tensor out = a.value();
  detail::add_into(out, b.value());
  return a.graph->record(std::move(out), {a.id, b.id},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           if (in[0]) detail::add_into(*in[0], g);
                           if (in[1]) detail::add_into(*in[1], g);
                         });
}

inline Var sub(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, "sub");
  Tensor out = a.value();
  detail::add_into(out, b.value(), -1.0);
  return a.graph->record(std::move(out), {a.id, b.id},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           if (in[0]) detail::add_into(*in[0], g);
                           if (in[1]) detail::add_into(*in[1], g, -1.0);
                         });
}

inline Var mul(Var a, Var b) {
  detail::require_same_graph(a, b);
  detail::require_same_shape(a, b, "mul");
  const Tensor* av = &a.value();
  const Tensor* bv = &b.value();
  Tensor out = *av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*bv)[i];
  return a.graph->record(std::move(out), {a.id, b.id},
                         [av, bv](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if (in[0]) (*in[0])[i] += g[i] * (*bv)[i];
                             if (in[1]) (*in[1])[i] += g[i] * (*av)[i];
                           }
                         });
}

inline Var scale(Var a, double c) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= c;
  return a.graph->record(std::move(out), {a.id},
                         [c](const Tensor& g, std::span<Tensor* const> in) {
                           detail::add_into(*in[0], g, c);
                         });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->record(Tensor::scalar(s), {a.id},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           for (double& v : in[0]->data()) v += g[0];
                         });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

// Scalar at flat index `i`.
inline Var pick(Var a, std::size_t i) {
  if (i >= a.value().size()) throw ShapeError("pick index out of range");
  return a.graph->record(Tensor::scalar(a.value()[i]), {a.id},
                         [i](const Tensor& g, std::span<Tensor* const> in) {
                           (*in[0])[i] += g[0];
                         });
}

inline Var reshape(Var a, Shape s) {
  Tensor out = a.value().reshaped(std::move(s));
  return a.graph->record(std::move(out), {a.id},
                         [](const Tensor& g, std::span<Tensor* const> in) {
                           detail::add_into(*in[0], g);
                         });
}

inline Var relu(Var a) {
  const Tensor* av = &a.value();
  Tensor out = *av;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return a.graph->record(std::move(out), {a.id},
                         [av](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             if ((*av)[i] > 0.0) (*in[0])[i] += g[i];
                           }
                         });
}

// Per-channel (x - mean[c]) / std[c] on [N,C,H,W]; mean and std are constants.
inline Var normalize_channels(Var x, std::span<const double> mean,
                              std::span<const double> stddev) {
  const Shape& s = x.shape();
  if (s.size() != 4 || mean.size() != s[1] || stddev.size() != s[1]) {
    throw ShapeError("normalize_channels shape mismatch for " + shape_string(s));
  }
  const std::size_t n = s[0], c = s[1], area = s[2] * s[3];
  std::vector<double> inv(c);
  for (std::size_t k = 0; k < c; ++k) inv[k] = 1.0 / stddev[k];
  std::vector<double> mu(mean.begin(), mean.end());
  Tensor out = x.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t p = 0; p < area; ++p) {
        double& v = out[(i * c + k) * area + p];
        v = (v - mu[k]) * inv[k];
      }
  return x.graph->record(
      std::move(out), {x.id},
      [inv, n, c, area](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < c; ++k)
            for (std::size_t p = 0; p < area; ++p) {
              const std::size_t idx = (i * c + k) * area + p;
              (*in[0])[idx] += g[idx] * inv[k];
            }
      });
}

// Cross-correlation of [N,C,H,W] with [K,C,kh,kw] plus bias [K].
inline Var conv2d(Var input, Var kernel, Var bias, std::size_t stride = 1,
                  std::size_t pad = 0) {
  detail::require_same_graph(input, kernel);
  detail::require_same_graph(input, bias);
  const Tensor* xv = &input.value();
  const Tensor* wv = &kernel.value();
  Tensor out = kernels::conv2d(*xv, *wv, bias.value(), stride, pad);
  const kernels::ConvGeometry geo =
      kernels::conv_geometry(xv->shape(), wv->shape(), stride, pad);
  return input.graph->record(
      std::move(out), {input.id, kernel.id, bias.id},
      [xv, wv, geo](const Tensor& g, std::span<Tensor* const> in) {
        using kernels::RowMatrix;
        const std::size_t area = geo.out_area();
        if (in[2]) {
          for (std::size_t n = 0; n < geo.n; ++n)
            for (std::size_t k = 0; k < geo.k; ++k) {
              const double* gp = g.data().data() + (n * geo.k + k) * area;
              double s = 0.0;
              for (std::size_t p = 0; p < area; ++p) s += gp[p];
              (*in[2])[k] += s;
            }
        }
        if (!in[0] && !in[1]) return;
        Eigen::Map<const RowMatrix> w(wv->data().data(), geo.k, geo.patch());
        RowMatrix col(geo.patch(), area);
        RowMatrix dcol;
        for (std::size_t n = 0; n < geo.n; ++n) {
          Eigen::Map<const RowMatrix> go(g.data().data() + n * geo.k * area, geo.k,
                                         area);
          if (in[1]) {
            im2col(xv->data().data() + n * geo.c * geo.h * geo.w, geo, col.data());
            Eigen::Map<RowMatrix> dw(in[1]->data().data(), geo.k, geo.patch());
            dw.noalias() += go * col.transpose();
          }
          if (in[0]) {
            dcol.noalias() = w.transpose() * go;
            kernels::col2im(dcol.data(), geo,
                            in[0]->data().data() + n * geo.c * geo.h * geo.w);
          }
        }
      });
}

// Non-overlapping k×k average pooling on [N,C,H,W]; H and W divisible by k.
inline Var avgpool2d(Var x, std::size_t k) {
  const Shape& s = x.shape();
  if (s.size() != 4 || k == 0 || s[2] % k != 0 || s[3] % k != 0) {
    throw ShapeError("avgpool2d(" + std::to_string(k) + ") incompatible with " +
                     shape_string(s));
  }
  const std::size_t n = s[0] * s[1], h = s[2], w = s[3], oh = h / k, ow = w / k;
  const double inv = 1.0 / static_cast<double>(k * k);
  const Tensor& xv = x.value();
  Tensor out(Shape{s[0], s[1], oh, ow});
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t z = 0; z < ow; ++z) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            acc += xv[(p * h + y * k + i) * w + z * k + j];
        out[(p * oh + y) * ow + z] = acc * inv;
      }
  return x.graph->record(
      std::move(out), {x.id},
      [n, h, w, oh, ow, k, inv](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t p = 0; p < n; ++p)
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t z = 0; z < ow; ++z) {
              const double v = g[(p * oh + y) * ow + z] * inv;
              for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j)
                  (*in[0])[(p * h + y * k + i) * w + z * k + j] += v;
            }
      });
}

// [N,C,H,W] -> [N,C] spatial mean.
inline Var global_avgpool(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 4) {
    throw ShapeError("global_avgpool expects [N,C,H,W], got " + shape_string(s));
  }
  const std::size_t n = s[0] * s[1], area = s[2] * s[3];
  const double inv = 1.0 / static_cast<double>(area);
  const Tensor& xv = x.value();
  Tensor out(Shape{s[0], s[1]});
  for (std::size_t p = 0; p < n; ++p) {
    double acc = 0.0;
    for (std::size_t q = 0; q < area; ++q) acc += xv[p * area + q];
    out[p] = acc * inv;
  }
  return x.graph->record(std::move(out), {x.id},
                         [n, area, inv](const Tensor& g, std::span<Tensor* const> in) {
                           for (std::size_t p = 0; p < n; ++p)
                             for (std::size_t q = 0; q < area; ++q)
                               (*in[0])[p * area + q] += g[p] * inv;
                         });
}

inline Var linear(Var x, Var weight, Var bias) {
  detail::require_same_graph(x, weight);
  detail::require_same_graph(x, bias);
  const Tensor* xv = &x.value();
  const Tensor* wv = &weight.value();
  Tensor out = kernels::linear(*xv, *wv, bias.value());
  return x.graph->record(
      std::move(out), {x.id, weight.id, bias.id},
      [xv, wv](const Tensor& g, std::span<Tensor* const> in) {
        const std::size_t n = xv->dim(0), d = xv->dim(1), o = wv->dim(0);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < o; ++j) {
            const double gj = g[r * o + j];
            if (in[2]) (*in[2])[j] += gj;
            for (std::size_t i = 0; i < d; ++i) {
              if (in[0]) (*in[0])[r * d + i] += gj * (*wv)[j * d + i];
              if (in[1]) (*in[1])[j * d + i] += gj * (*xv)[r * d + i];
            }
          }
      });
}

inline Var softmax(Var x) {
  Tensor out = kernels::softmax(x.value());
  const std::size_t n = out.dim(0), c = out.dim(1);
  Tensor saved = out;
  return x.graph->record(
      std::move(out), {x.id},
      [saved = std::move(saved), n, c](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < n; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * saved[r * c + j];
          for (std::size_t j = 0; j < c; ++j)
            (*in[0])[r * c + j] += saved[r * c + j] * (g[r * c + j] - dot);
        }
      });
}

// Row-wise logsumexp: [N,C] -> [N].
inline Var logsumexp(Var x) {
  Tensor out = kernels::logsumexp(x.value());
  Tensor probs = kernels::softmax(x.value());
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  return x.graph->record(
      std::move(out), {x.id},
      [probs = std::move(probs), n, c](const Tensor& g, std::span<Tensor* const> in) {
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j)
            (*in[0])[r * c + j] += g[r] * probs[r * c + j];
      });
}

enum class Reduction { kMean, kSum };

// Softmax cross entropy against integer labels.
inline Var cross_entropy(Var logits, std::span<const int> labels,
                         Reduction reduction = Reduction::kMean) {
  const Tensor& lv = logits.value();
  kernels::require_matrix(lv, "cross_entropy");
  const std::size_t n = lv.dim(0), c = lv.dim(1);
  if (labels.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(n));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw Error("cross_entropy: label " + std::to_string(y) +
                  " outside [0, " + std::to_string(c) + ")");
    }
  }
  const Tensor lse = kernels::logsumexp(lv);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) total += lse[r] - lv[r * c + labels[r]];
  const double factor = reduction == Reduction::kMean ? 1.0 / static_cast<double>(n) : 1.0;
  Tensor probs = kernels::softmax(lv);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.graph->record(
      Tensor::scalar(total * factor), {logits.id},
      [probs = std::move(probs), ys = std::move(ys), n, c, factor](
          const Tensor& g, std::span<Tensor* const> in) {
        const double s = g[0] * factor;
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = static_cast<int>(j) == ys[r] ? 1.0 : 0.0;
            (*in[0])[r * c + j] += s * (probs[r * c + j] - onehot);
          }
      });
}

}  // namespace ops
}  // namespace advood
