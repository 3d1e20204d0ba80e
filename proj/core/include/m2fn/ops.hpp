#pragma once

#include <cstddef>
#include <vector>

#include "m2fn/tensor.hpp"

// Differentiable primitives. Every op validates shapes, checks its output for
// non-finite values and records itself on the active tape when any input
// requires grad. There is no implicit broadcasting; replicate_spatial and
// add_row_vector are the only shape-expanding ops.
namespace m2fn {

// Cross-correlation over NCHW input with an OIHW kernel.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride = 1, std::size_t padding = 0);

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Per-channel running statistics, updated in train mode by exponential moving
// average (unbiased variance, as is customary).
struct RunningStats {
  Tensor mean;  // [C]
  Tensor var;   // [C]
  double momentum = kBatchNormMomentum;

  static RunningStats create(std::size_t channels);
};

// Normalizes each channel of x[N,C,...] without the affine part.
Tensor batch_normalize(const Tensor& x, Mode mode, RunningStats& stats,
                       double eps = kBatchNormEps);

// y[n,c,...] = x[n,c,...] * scale[c] + shift[c]
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);

// y[n,c,...] = x[n,c,...] * scale[n,c] + shift[n,c]
Tensor sample_channel_affine(const Tensor& x, const Tensor& scale,
                             const Tensor& shift);

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Mode mode, RunningStats& stats, double eps = kBatchNormEps);

// y = x * W^T + b for x[N,Din], W[Dout,Din], b[Dout].
Tensor dense_affine(const Tensor& x, const Tensor& weight, const Tensor& bias);

// x[N,C] + v[C] broadcast over rows.
Tensor add_row_vector(const Tensor& x, const Tensor& v);

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor max_pool2d(const Tensor& x, std::size_t window = 2, std::size_t stride = 2);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

// Concatenation along `axis`; all other extents must agree.
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// aux[N,D] -> [N,D,H,W] with aux[n,d] at every spatial position.
Tensor replicate_spatial(const Tensor& aux, std::size_t height, std::size_t width);

Tensor reshape(const Tensor& x, Shape shape);

// [N,C,H,W] -> [N,C]
Tensor spatial_mean(const Tensor& x);

// pooled[n,c] = sum_p attn[n,p] * features[n,c,p] for features[N,C,H,W] and
// attn[N,H*W].
Tensor attention_pool(const Tensor& features, const Tensor& attn);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

}  // namespace m2fn
