#include "m2fn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "m2fn/errors.hpp"

namespace m2fn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::string dims(const Tensor& t) { return shape_string(t.shape()); }

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": " + arg + " is undefined");
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + arg + " must have rank " +
                     std::to_string(rank) + ", got " + dims(t));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + dims(a) + " vs " + dims(b));
  }
}

Tensor finish(Tensor out, const char* op) {
  check_finite(out, op);
  return out;
}

bool wants_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

// Spatial size of x[N,C,...] beyond the first two axes.
std::size_t trailing_size(const Tensor& x) {
  std::size_t s = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) s *= x.dim(i);
  return s;
}

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, stride, pad, hout, wout;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t positions() const { return hout * wout; }
};

void im2col(const double* img, const ConvGeometry& g, double* cols) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.hout; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t oj = 0; oj < g.wout; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            double v = 0.0;
            if (ii >= 0 && jj >= 0 && ii < static_cast<long>(g.h) && jj < static_cast<long>(g.w)) {
              v = img[(c * g.h + ii) * g.w + jj];
            }
            row[oi * g.wout + oj] = v;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvGeometry& g, double* img) {
  const std::size_t p = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * p;
        for (std::size_t oi = 0; oi < g.hout; ++oi) {
          const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
          if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
          for (std::size_t oj = 0; oj < g.wout; ++oj) {
            const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
            if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
            img[(c * g.h + ii) * g.w + jj] += row[oi * g.wout + oj];
          }
        }
      }
    }
  }
}

}  // namespace

RunningStats RunningStats::create(std::size_t channels) {
  return RunningStats{Tensor::zeros({channels}), Tensor::full({channels}, 1.0),
                      kBatchNormMomentum};
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  require_rank(bias, 1, "conv2d", "bias");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.n = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = kernel.dim(0);
  g.kh = kernel.dim(2);
  g.kw = kernel.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.cin) {
    throw ShapeError("conv2d: input channels (input axis 1) = " + std::to_string(g.cin) +
                     " but kernel in-channels (kernel axis 1) = " +
                     std::to_string(kernel.dim(1)));
  }
  if (bias.dim(0) != g.cout) {
    throw ShapeError("conv2d: bias length (bias axis 0) = " + std::to_string(bias.dim(0)) +
                     " but kernel out-channels (kernel axis 0) = " + std::to_string(g.cout));
  }
  if (g.kh > g.h + 2 * padding) {
    throw ShapeError("conv2d: kernel height (kernel axis 2) = " + std::to_string(g.kh) +
                     " exceeds padded input height (input axis 2) = " +
                     std::to_string(g.h + 2 * padding));
  }
  if (g.kw > g.w + 2 * padding) {
    throw ShapeError("conv2d: kernel width (kernel axis 3) = " + std::to_string(g.kw) +
                     " exceeds padded input width (input axis 3) = " +
                     std::to_string(g.w + 2 * padding));
  }
  g.hout = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wout = (g.w + 2 * padding - g.kw) / stride + 1;

  const std::size_t patch = g.patch();
  const std::size_t positions = g.positions();
  std::vector<double> out(g.n * g.cout * positions);
  std::vector<double> cols(patch * positions);
  const ConstMap kmat(kernel.values().data(), g.cout, patch);
  const Eigen::Map<const Eigen::VectorXd> bvec(bias.values().data(), g.cout);
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(input.values().data() + n * g.cin * g.h * g.w, g, cols.data());
    MutMap o(out.data() + n * g.cout * positions, g.cout, positions);
    o.noalias() = kmat * ConstMap(cols.data(), patch, positions);
    o.colwise() += bvec;
  }
  Tensor result({g.n, g.cout, g.hout, g.wout}, std::move(out));
  Tape::record("conv2d", {input, kernel, bias}, result,
               [input, kernel, bias, result, g]() mutable {
                 const std::size_t patch = g.patch();
                 const std::size_t positions = g.positions();
                 std::vector<double> cols(patch * positions);
                 std::vector<double> dcols(patch * positions);
                 const ConstMap kmat(kernel.values().data(), g.cout, patch);
                 const bool gi = wants_grad(input), gk = wants_grad(kernel),
                            gb = wants_grad(bias);
                 for (std::size_t n = 0; n < g.n; ++n) {
                   const ConstMap dout(result.grad().data() + n * g.cout * positions, g.cout,
                                       positions);
                   if (gb) {
                     Eigen::Map<Eigen::VectorXd> db(bias.mutable_grad().data(), g.cout);
                     db += dout.rowwise().sum();
                   }
                   if (gk) {
                     im2col(input.values().data() + n * g.cin * g.h * g.w, g, cols.data());
                     MutMap dk(kernel.mutable_grad().data(), g.cout, patch);
                     dk.noalias() += dout * ConstMap(cols.data(), patch, positions).transpose();
                   }
                   if (gi) {
                     MutMap dc(dcols.data(), patch, positions);
                     dc.noalias() = kmat.transpose() * dout;
                     col2im_add(dcols.data(), g, input.mutable_grad().data() + n * g.cin * g.h * g.w);
                   }
                 }
               });
  return finish(result, "conv2d");
}

Tensor batch_normalize(const Tensor& x, Mode mode, RunningStats& stats, double eps) {
  if (!x.defined() || x.rank() < 2) {
    throw ShapeError("batch_norm: input must have rank >= 2");
  }
  const std::size_t n = x.dim(0), c = x.dim(1), s = trailing_size(x);
  if (stats.mean.size() != c || stats.var.size() != c) {
    throw ShapeError("batch_norm: running stats have " + std::to_string(stats.mean.size()) +
                     " channels but input axis 1 = " + std::to_string(c));
  }
  if (mode == Mode::kTrain && n < 2) {
    throw BatchSizeError("batch_norm: train mode needs batch size >= 2, got " +
                         std::to_string(n));
  }
  const std::size_t m = n * s;
  std::vector<double> inv_std(c);
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu = 0.0, var = 0.0;
    if (mode == Mode::kTrain) {
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = xv.data() + (i * c + ch) * s;
        for (std::size_t k = 0; k < s; ++k) mu += p[k];
      }
      mu /= static_cast<double>(m);
      for (std::size_t i = 0; i < n; ++i) {
        const double* p = xv.data() + (i * c + ch) * s;
        for (std::size_t k = 0; k < s; ++k) var += (p[k] - mu) * (p[k] - mu);
      }
      var /= static_cast<double>(m);
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      auto rm = stats.mean.mutable_values();
      auto rv = stats.var.mutable_values();
      rm[ch] = (1.0 - stats.momentum) * rm[ch] + stats.momentum * mu;
      rv[ch] = (1.0 - stats.momentum) * rv[ch] + stats.momentum * unbiased;
    } else {
      mu = stats.mean.values()[ch];
      var = stats.var.values()[ch];
    }
    inv_std[ch] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const double* p = xv.data() + (i * c + ch) * s;
      double* q = out.data() + (i * c + ch) * s;
      for (std::size_t k = 0; k < s; ++k) q[k] = (p[k] - mu) * inv_std[ch];
    }
  }
  Tensor result(x.shape(), std::move(out));
  Tape::record("batch_normalize", {x}, result, [x, result, inv_std, n, c, s, mode]() mutable {
    auto dx = x.mutable_grad();
    const auto g = result.grad();
    const auto xh = result.values();
    const double m = static_cast<double>(n * s);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double g_mean = 0.0, gx_mean = 0.0;
      if (mode == Mode::kTrain) {
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t off = (i * c + ch) * s;
          for (std::size_t k = 0; k < s; ++k) {
            g_mean += g[off + k];
            gx_mean += g[off + k] * xh[off + k];
          }
        }
        g_mean /= m;
        gx_mean /= m;
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t off = (i * c + ch) * s;
        for (std::size_t k = 0; k < s; ++k) {
          dx[off + k] += inv_std[ch] * (g[off + k] - g_mean - xh[off + k] * gx_mean);
        }
      }
    }
  });
  return finish(result, "batch_norm");
}

Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  if (!x.defined() || x.rank() < 2) throw ShapeError("channel_affine: input rank must be >= 2");
  require_rank(scale, 1, "channel_affine", "scale");
  require_rank(shift, 1, "channel_affine", "shift");
  const std::size_t n = x.dim(0), c = x.dim(1), s = trailing_size(x);
  if (scale.dim(0) != c || shift.dim(0) != c) {
    throw ShapeError("channel_affine: scale/shift length must equal input axis 1 = " +
                     std::to_string(c));
  }
  std::vector<double> out(x.size());
  const auto xv = x.values(), sv = scale.values(), bv = shift.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * s;
      for (std::size_t k = 0; k < s; ++k) out[off + k] = xv[off + k] * sv[ch] + bv[ch];
    }
  Tensor result(x.shape(), std::move(out));
  Tape::record("channel_affine", {x, scale, shift}, result,
               [x, scale, shift, result, n, c, s]() mutable {
                 const auto g = result.grad();
                 const auto xv = x.values(), sv = scale.values();
                 const bool gx = wants_grad(x), gs = wants_grad(scale), gb = wants_grad(shift);
                 for (std::size_t i = 0; i < n; ++i)
                   for (std::size_t ch = 0; ch < c; ++ch) {
                     const std::size_t off = (i * c + ch) * s;
                     double acc_s = 0.0, acc_b = 0.0;
                     for (std::size_t k = 0; k < s; ++k) {
                       acc_s += g[off + k] * xv[off + k];
                       acc_b += g[off + k];
                     }
                     if (gx) {
                       auto dx = x.mutable_grad();
                       for (std::size_t k = 0; k < s; ++k) dx[off + k] += g[off + k] * sv[ch];
                     }
                     if (gs) scale.mutable_grad()[ch] += acc_s;
                     if (gb) shift.mutable_grad()[ch] += acc_b;
                   }
               });
  return finish(result, "channel_affine");
}

Tensor sample_channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  if (!x.defined() || x.rank() < 2) {
    throw ShapeError("sample_channel_affine: input rank must be >= 2");
  }
  require_rank(scale, 2, "sample_channel_affine", "scale");
  require_rank(shift, 2, "sample_channel_affine", "shift");
  const std::size_t n = x.dim(0), c = x.dim(1), s = trailing_size(x);
  if (scale.dim(0) != n || scale.dim(1) != c || shift.shape() != scale.shape()) {
    throw ShapeError("sample_channel_affine: scale/shift must be [" + std::to_string(n) + "," +
                     std::to_string(c) + "], got " + dims(scale) + " and " + dims(shift));
  }
  std::vector<double> out(x.size());
  const auto xv = x.values(), sv = scale.values(), bv = shift.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (i * c + ch) * s;
      const double sc = sv[i * c + ch], sh = bv[i * c + ch];
      for (std::size_t k = 0; k < s; ++k) out[off + k] = xv[off + k] * sc + sh;
    }
  Tensor result(x.shape(), std::move(out));
  Tape::record("sample_channel_affine", {x, scale, shift}, result,
               [x, scale, shift, result, n, c, s]() mutable {
                 const auto g = result.grad();
                 const auto xv = x.values(), sv = scale.values();
                 const bool gx = wants_grad(x), gs = wants_grad(scale), gb = wants_grad(shift);
                 for (std::size_t i = 0; i < n; ++i)
                   for (std::size_t ch = 0; ch < c; ++ch) {
                     const std::size_t off = (i * c + ch) * s;
                     double acc_s = 0.0, acc_b = 0.0;
                     for (std::size_t k = 0; k < s; ++k) {
                       acc_s += g[off + k] * xv[off + k];
                       acc_b += g[off + k];
                     }
                     if (gx) {
                       auto dx = x.mutable_grad();
                       const double sc = sv[i * c + ch];
                       for (std::size_t k = 0; k < s; ++k) dx[off + k] += g[off + k] * sc;
                     }
                     if (gs) scale.mutable_grad()[i * c + ch] += acc_s;
                     if (gb) shift.mutable_grad()[i * c + ch] += acc_b;
                   }
               });
  return finish(result, "sample_channel_affine");
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Mode mode,
                  RunningStats& stats, double eps) {
  return channel_affine(batch_normalize(x, mode, stats, eps), gamma, beta);
}

Tensor dense_affine(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "dense_affine", "input");
  require_rank(weight, 2, "dense_affine", "weight");
  require_rank(bias, 1, "dense_affine", "bias");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw ShapeError("dense_affine: input axis 1 = " + std::to_string(din) +
                     " but weight axis 1 = " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != dout) {
    throw ShapeError("dense_affine: bias length " + std::to_string(bias.dim(0)) +
                     " but weight axis 0 = " + std::to_string(dout));
  }
  std::vector<double> out(n * dout);
  {
    MutMap y(out.data(), n, dout);
    y.noalias() = ConstMap(x.values().data(), n, din) *
                  ConstMap(weight.values().data(), dout, din).transpose();
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.values().data(), dout);
  }
  Tensor result({n, dout}, std::move(out));
  Tape::record("dense_affine", {x, weight, bias}, result,
               [x, weight, bias, result, n, din, dout]() mutable {
                 const ConstMap dy(result.grad().data(), n, dout);
                 if (wants_grad(x)) {
                   MutMap dx(x.mutable_grad().data(), n, din);
                   dx.noalias() += dy * ConstMap(weight.values().data(), dout, din);
                 }
                 if (wants_grad(weight)) {
                   MutMap dw(weight.mutable_grad().data(), dout, din);
                   dw.noalias() += dy.transpose() * ConstMap(x.values().data(), n, din);
                 }
                 if (wants_grad(bias)) {
                   Eigen::Map<Eigen::RowVectorXd> db(bias.mutable_grad().data(), dout);
                   db += dy.colwise().sum();
                 }
               });
  return finish(result, "dense_affine");
}

Tensor add_row_vector(const Tensor& x, const Tensor& v) {
  require_rank(x, 2, "add_row_vector", "input");
  require_rank(v, 1, "add_row_vector", "vector");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (v.dim(0) != c) {
    throw ShapeError("add_row_vector: vector length " + std::to_string(v.dim(0)) +
                     " but input axis 1 = " + std::to_string(c));
  }
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = v.values()[j] + x.values()[i * c + j];
  Tensor result(x.shape(), std::move(out));
  Tape::record("add_row_vector", {x, v}, result, [x, v, result, n, c]() mutable {
    const auto g = result.grad();
    if (wants_grad(x)) {
      auto dx = x.mutable_grad();
      for (std::size_t k = 0; k < g.size(); ++k) dx[k] += g[k];
    }
    if (wants_grad(v)) {
      auto dv = v.mutable_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) dv[j] += g[i * c + j];
    }
  });
  return finish(result, "add_row_vector");
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  Tensor result(x.shape(), std::move(out));
  Tape::record("relu", {x}, result, [x, result]() mutable {
    const auto g = result.grad();
    const auto xv = x.values();
    auto dx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) dx[i] += g[i];
  });
  return finish(result, "relu");
}

Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  Tensor result(x.shape(), std::move(out));
  Tape::record("tanh", {x}, result, [x, result]() mutable {
    const auto g = result.grad();
    const auto y = result.values();
    auto dx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
  });
  return finish(result, "tanh");
}

Tensor softmax_lastdim(const Tensor& x) {
  if (!x.defined() || x.rank() < 1) throw ShapeError("softmax_lastdim: input has no axes");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.size() / k;
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = xv.data() + r * k;
    double* q = out.data() + r * k;
    const double mx = *std::max_element(p, p + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      q[j] = std::exp(p[j] - mx);
      z += q[j];
    }
    for (std::size_t j = 0; j < k; ++j) q[j] /= z;
  }
  Tensor result(x.shape(), std::move(out));
  Tape::record("softmax_lastdim", {x}, result, [x, result, rows, k]() mutable {
    const auto g = result.grad();
    const auto y = result.values();
    auto dx = x.mutable_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
      for (std::size_t j = 0; j < k; ++j) dx[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
    }
  });
  return finish(result, "softmax_lastdim");
}

Tensor max_pool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  require_rank(x, 4, "max_pool2d", "input");
  if (window == 0 || stride == 0) throw ShapeError("max_pool2d: window and stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) +
                     " exceeds input spatial extent (axes 2,3) " + dims(x));
  }
  const std::size_t ho = (h - window) / stride + 1, wo = (w - window) / stride + 1;
  std::vector<double> out(n * c * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  const auto xv = x.values();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = base + (i * stride) * w + j * stride;
        for (std::size_t a = 0; a < window; ++a)
          for (std::size_t b = 0; b < window; ++b) {
            const std::size_t idx = base + (i * stride + a) * w + (j * stride + b);
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (plane * ho + i) * wo + j;
        out[o] = xv[best];
        argmax[o] = best;
      }
  }
  Tensor result({n, c, ho, wo}, std::move(out));
  Tape::record("max_pool2d", {x}, result, [x, result, argmax]() mutable {
    const auto g = result.grad();
    auto dx = x.mutable_grad();
    for (std::size_t o = 0; o < g.size(); ++o) dx[argmax[o]] += g[o];
  });
  return finish(result, "max_pool2d");
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require_same_shape(a, b, op);
  std::vector<double> out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  Tensor result(a.shape(), std::move(out));
  Tape::record(op, {a, b}, result, [a, b, result, bwd]() mutable {
    const auto g = result.grad();
    const auto av = a.values(), bv = b.values();
    const bool ga = wants_grad(a), gb = wants_grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto [da, db] = bwd(av[i], bv[i], g[i]);
      if (ga) a.mutable_grad()[i] += da;
      if (gb) b.mutable_grad()[i] += db;
    }
  });
  return finish(result, op);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g) { return std::pair{g, g}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g) { return std::pair{g * y, g * x}; });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * factor;
  Tensor result(x.shape(), std::move(out));
  Tape::record("scale", {x}, result, [x, result, factor]() mutable {
    const auto g = result.grad();
    auto dx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
  });
  return finish(result, "scale");
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_string(ref));
  std::size_t outer = 1, inner = 1, total = 0;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  for (const Tensor& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw ShapeError("concat: extent mismatch on axis " + std::to_string(i) + ": " +
                         shape_string(ref) + " vs " + shape_string(p.shape()));
      }
    }
    total += p.dim(axis);
  }
  Shape shape = ref;
  shape[axis] = total;
  std::vector<double> out(element_count(shape));
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.values().data() + o * chunk, chunk,
                  out.data() + o * total * inner + offset * inner);
    }
    offset += p.dim(axis);
  }
  Tensor result(std::move(shape), std::move(out));
  Tape::record("concat", parts, result, [parts, result, axis, outer, inner, total]() mutable {
    const auto g = result.grad();
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
      const std::size_t chunk = p.dim(axis) * inner;
      if (wants_grad(p)) {
        auto dp = p.mutable_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < chunk; ++k)
            dp[o * chunk + k] += g[o * total * inner + offset * inner + k];
      }
      offset += p.dim(axis);
    }
  });
  return finish(result, "concat");
}

Tensor replicate_spatial(const Tensor& aux, std::size_t height, std::size_t width) {
  require_rank(aux, 2, "replicate_spatial", "aux");
  const std::size_t n = aux.dim(0), d = aux.dim(1), s = height * width;
  std::vector<double> out(n * d * s);
  for (std::size_t i = 0; i < n * d; ++i) std::fill_n(out.data() + i * s, s, aux.values()[i]);
  Tensor result({n, d, height, width}, std::move(out));
  Tape::record("replicate_spatial", {aux}, result, [aux, result, n, d, s]() mutable {
    const auto g = result.grad();
    auto da = aux.mutable_grad();
    for (std::size_t i = 0; i < n * d; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < s; ++k) acc += g[i * s + k];
      da[i] += acc;
    }
  });
  return finish(result, "replicate_spatial");
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (element_count(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + dims(x) + " as " + shape_string(shape));
  }
  Tensor result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  Tape::record("reshape", {x}, result, [x, result]() mutable {
    const auto g = result.grad();
    auto dx = x.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
  return result;
}

Tensor spatial_mean(const Tensor& x) {
  require_rank(x, 4, "spatial_mean", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < s; ++k) acc += x.values()[i * s + k];
    out[i] = acc / static_cast<double>(s);
  }
  Tensor result({n, c}, std::move(out));
  Tape::record("spatial_mean", {x}, result, [x, result, n, c, s]() mutable {
    const auto g = result.grad();
    auto dx = x.mutable_grad();
    const double inv = 1.0 / static_cast<double>(s);
    for (std::size_t i = 0; i < n * c; ++i)
      for (std::size_t k = 0; k < s; ++k) dx[i * s + k] += g[i] * inv;
  });
  return finish(result, "spatial_mean");
}

Tensor attention_pool(const Tensor& features, const Tensor& attn) {
  require_rank(features, 4, "attention_pool", "features");
  require_rank(attn, 2, "attention_pool", "attn");
  const std::size_t n = features.dim(0), c = features.dim(1),
                    s = features.dim(2) * features.dim(3);
  if (attn.dim(0) != n || attn.dim(1) != s) {
    throw ShapeError("attention_pool: attn must be [" + std::to_string(n) + "," +
                     std::to_string(s) + "], got " + dims(attn));
  }
  std::vector<double> out(n * c);
  const auto fv = features.values(), av = attn.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t p = 0; p < s; ++p) acc += av[i * s + p] * fv[(i * c + ch) * s + p];
      out[i * c + ch] = acc;
    }
  Tensor result({n, c}, std::move(out));
  Tape::record("attention_pool", {features, attn}, result,
               [features, attn, result, n, c, s]() mutable {
                 const auto g = result.grad();
                 const auto fv = features.values(), av = attn.values();
                 const bool gf = wants_grad(features), ga = wants_grad(attn);
                 for (std::size_t i = 0; i < n; ++i)
                   for (std::size_t ch = 0; ch < c; ++ch) {
                     const double gi = g[i * c + ch];
                     for (std::size_t p = 0; p < s; ++p) {
                       if (gf) features.mutable_grad()[(i * c + ch) * s + p] += gi * av[i * s + p];
                       if (ga) attn.mutable_grad()[i * s + p] += gi * fv[(i * c + ch) * s + p];
                     }
                   }
               });
  return finish(result, "attention_pool");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor result = Tensor::scalar(acc);
  Tape::record("sum", {x}, result, [x, result]() mutable {
    const double g = result.grad()[0];
    auto dx = x.mutable_grad();
    for (double& d : dx) d += g;
  });
  return finish(result, "sum");
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  const double inv = 1.0 / static_cast<double>(x.size());
  Tensor result = Tensor::scalar(acc * inv);
  Tape::record("mean", {x}, result, [x, result, inv]() mutable {
    const double g = result.grad()[0] * inv;
    auto dx = x.mutable_grad();
    for (double& d : dx) d += g;
  });
  return finish(result, "mean");
}

}  // namespace m2fn
