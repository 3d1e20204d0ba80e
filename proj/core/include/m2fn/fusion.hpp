#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "m2fn/ops.hpp"
#include "m2fn/tensor.hpp"

namespace m2fn {

// Ordered (path, tensor) pairs; paths are dot-separated module names.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Kaiming-uniform weights, bound sqrt(6 / fan_in), seeded by (seed, path).
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed,
                       const std::string& path);

struct DenseLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]

  static DenseLayer create(std::size_t in, std::size_t out, std::uint64_t seed,
                           const std::string& path);
  static DenseLayer zeros(std::size_t in, std::size_t out);
  Tensor operator()(const Tensor& x) const { return dense_affine(x, weight, bias); }
  void collect(const std::string& prefix, NamedTensors& params) const;
};

struct ConvLayer {
  Tensor kernel;  // [out, in, k, k]
  Tensor bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  static ConvLayer create(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          std::size_t padding, std::uint64_t seed, const std::string& path);
  Tensor operator()(const Tensor& x) const { return conv2d(x, kernel, bias, stride, padding); }
  void collect(const std::string& prefix, NamedTensors& params) const;
};

struct BatchNormLayer {
  Tensor gamma;  // [C], ones
  Tensor beta;   // [C], zeros
  RunningStats stats;

  static BatchNormLayer create(std::size_t channels);
  Tensor operator()(const Tensor& x, Mode mode) {
    return batch_norm(x, gamma, beta, mode, stats);
  }
  void collect(const std::string& prefix, NamedTensors& params) const;
  void collect_buffers(const std::string& prefix, NamedTensors& buffers) const;
};

// Low-level fusion: batch norm whose per-sample scale and shift are
// (gamma + dgamma(aux), beta + dbeta(aux)), with the deltas produced by a
// one-hidden-layer relu MLP over the aux vector. The delta output layers start
// at zero, so a fresh block reproduces plain batch norm exactly.
struct CbnBlock {
  BatchNormLayer base;
  DenseLayer hidden;
  DenseLayer delta_gamma;
  DenseLayer delta_beta;

  static CbnBlock create(std::size_t channels, std::size_t dim_aux, std::size_t hidden_width,
                         std::uint64_t seed, const std::string& path = "cbn");
  std::size_t channels() const { return base.gamma.size(); }
  std::size_t dim_aux() const { return hidden.weight.dim(1); }
  void collect(const std::string& prefix, NamedTensors& params) const;
  void collect_buffers(const std::string& prefix, NamedTensors& buffers) const;
};

Tensor cbn_forward(CbnBlock& block, const Tensor& features, const Tensor& aux, Mode mode);

// features[N,C,H,W], aux[N,D] -> [N,C+D,H,W]; aux[n,d] fills channel C+d.
// An undefined aux stands for D = 0 and returns the features unchanged.
Tensor replicate_and_concat(const Tensor& features, const Tensor& aux);

// Position-wise MLP (C + dim_aux -> hidden -> 1, relu) over the replicated
// concat, realised as two 1x1 convolutions. The logit bias is a fixed zero and
// not a parameter: softmax over positions cancels any constant offset.
struct SpatialAttentionBlock {
  ConvLayer hidden;
  ConvLayer logit;
  std::size_t feature_channels = 0;

  static SpatialAttentionBlock create(std::size_t channels, std::size_t dim_aux,
                                      std::size_t hidden_width, std::uint64_t seed,
                                      const std::string& path = "attn");
  std::size_t channels() const { return feature_channels; }
  std::size_t dim_aux() const { return hidden.kernel.dim(1) - feature_channels; }
  void collect(const std::string& prefix, NamedTensors& params) const;
};

struct AttentionOutput {
  Tensor pooled;  // [N,C]
  Tensor attn;    // [N,H*W], rows sum to 1
  Tensor logits;  // [N,H*W]
};

AttentionOutput spatial_attention(const SpatialAttentionBlock& block, const Tensor& features,
                                  const Tensor& aux);

// tanh(visual_map(visual)) * tanh(aux_map(aux))
struct HighFusionBlock {
  DenseLayer visual_map;
  DenseLayer aux_map;

  static HighFusionBlock create(std::size_t visual_dim, std::size_t dim_aux,
                                std::size_t fused_dim, std::uint64_t seed,
                                const std::string& path = "high");
  std::size_t fused_dim() const { return visual_map.bias.size(); }
  void collect(const std::string& prefix, NamedTensors& params) const;
};

Tensor high_level_fuse(const HighFusionBlock& block, const Tensor& visual, const Tensor& aux);

}  // namespace m2fn
