#include "m2fn/fusion.hpp"

#include <cmath>

#include "m2fn/errors.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::uint64_t seed,
                       const std::string& path) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  SplitMix rng(derive_seed(seed, path));
  std::vector<double> values(element_count(shape));
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(values), true);
}

DenseLayer DenseLayer::create(std::size_t in, std::size_t out, std::uint64_t seed,
                              const std::string& path) {
  return DenseLayer{kaiming_uniform({out, in}, in, seed, path + ".weight"),
                    Tensor::zeros({out}, true)};
}

DenseLayer DenseLayer::zeros(std::size_t in, std::size_t out) {
  return DenseLayer{Tensor::zeros({out, in}, true), Tensor::zeros({out}, true)};
}

void DenseLayer::collect(const std::string& prefix, NamedTensors& params) const {
  params.emplace_back(prefix + ".weight", weight);
  params.emplace_back(prefix + ".bias", bias);
}

ConvLayer ConvLayer::create(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                            std::size_t padding, std::uint64_t seed, const std::string& path) {
  return ConvLayer{kaiming_uniform({out, in, k, k}, in * k * k, seed, path + ".kernel"),
                   Tensor::zeros({out}, true), stride, padding};
}

void ConvLayer::collect(const std::string& prefix, NamedTensors& params) const {
  params.emplace_back(prefix + ".kernel", kernel);
  params.emplace_back(prefix + ".bias", bias);
}

BatchNormLayer BatchNormLayer::create(std::size_t channels) {
  return BatchNormLayer{Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true),
                        RunningStats::create(channels)};
}

void BatchNormLayer::collect(const std::string& prefix, NamedTensors& params) const {
  params.emplace_back(prefix + ".gamma", gamma);
  params.emplace_back(prefix + ".beta", beta);
}

void BatchNormLayer::collect_buffers(const std::string& prefix, NamedTensors& buffers) const {
  buffers.emplace_back(prefix + ".running_mean", stats.mean);
  buffers.emplace_back(prefix + ".running_var", stats.var);
}

CbnBlock CbnBlock::create(std::size_t channels, std::size_t dim_aux, std::size_t hidden_width,
                          std::uint64_t seed, const std::string& path) {
  if (dim_aux == 0) throw ConfigError("cbn: dim_aux must be positive");
  return CbnBlock{BatchNormLayer::create(channels),
                  DenseLayer::create(dim_aux, hidden_width, seed, path + ".hidden"),
                  DenseLayer::zeros(hidden_width, channels),
                  DenseLayer::zeros(hidden_width, channels)};
}

void CbnBlock::collect(const std::string& prefix, NamedTensors& params) const {
  base.collect(prefix + ".base", params);
  hidden.collect(prefix + ".hidden", params);
  delta_gamma.collect(prefix + ".delta_gamma", params);
  delta_beta.collect(prefix + ".delta_beta", params);
}

void CbnBlock::collect_buffers(const std::string& prefix, NamedTensors& buffers) const {
  base.collect_buffers(prefix + ".base", buffers);
}

Tensor cbn_forward(CbnBlock& block, const Tensor& features, const Tensor& aux, Mode mode) {
  if (aux.rank() != 2 || aux.dim(1) != block.dim_aux()) {
    throw SchemaError("cbn: aux width " + (aux.rank() == 2 ? std::to_string(aux.dim(1)) : "?") +
                      " does not match block dim_aux " + std::to_string(block.dim_aux()));
  }
  if (features.rank() != 4 || aux.dim(0) != features.dim(0)) {
    throw ShapeError("cbn: aux rows must equal feature batch size");
  }
  const Tensor normalized = batch_normalize(features, mode, block.base.stats);
  const Tensor h = relu(block.hidden(aux));
  const Tensor scale = add_row_vector(block.delta_gamma(h), block.base.gamma);
  const Tensor shift = add_row_vector(block.delta_beta(h), block.base.beta);
  return sample_channel_affine(normalized, scale, shift);
}

Tensor replicate_and_concat(const Tensor& features, const Tensor& aux) {
  if (features.defined() && features.rank() == 4 && !aux.defined()) return features;
  if (!features.defined() || features.rank() != 4 || aux.rank() != 2) {
    throw ShapeError("replicate_and_concat: expects features [N,C,H,W] and aux [N,D]");
  }
  if (features.dim(0) != aux.dim(0)) {
    throw ShapeError("replicate_and_concat: batch mismatch " + std::to_string(features.dim(0)) +
                     " vs " + std::to_string(aux.dim(0)));
  }
  return concat({features, replicate_spatial(aux, features.dim(2), features.dim(3))}, 1);
}

SpatialAttentionBlock SpatialAttentionBlock::create(std::size_t channels, std::size_t dim_aux,
                                                    std::size_t hidden_width, std::uint64_t seed,
                                                    const std::string& path) {
  return SpatialAttentionBlock{
      ConvLayer::create(channels + dim_aux, hidden_width, 1, 1, 0, seed, path + ".hidden"),
      ConvLayer::create(hidden_width, 1, 1, 1, 0, seed, path + ".logit"), channels};
}

void SpatialAttentionBlock::collect(const std::string& prefix, NamedTensors& params) const {
  hidden.collect(prefix + ".hidden", params);
  params.emplace_back(prefix + ".logit.kernel", logit.kernel);
}

AttentionOutput spatial_attention(const SpatialAttentionBlock& block, const Tensor& features,
                                  const Tensor& aux) {
  const Tensor joint = replicate_and_concat(features, aux);
  if (joint.dim(1) != block.hidden.kernel.dim(1)) {
    throw SchemaError("attention: feature channels + aux width = " +
                      std::to_string(joint.dim(1)) + " but block expects " +
                      std::to_string(block.hidden.kernel.dim(1)));
  }
  const std::size_t n = features.dim(0), positions = features.dim(2) * features.dim(3);
  const Tensor logit_map = block.logit(relu(block.hidden(joint)));
  AttentionOutput out;
  out.logits = reshape(logit_map, {n, positions});
  out.attn = softmax_lastdim(out.logits);
  out.pooled = attention_pool(features, out.attn);
  return out;
}

HighFusionBlock HighFusionBlock::create(std::size_t visual_dim, std::size_t dim_aux,
                                        std::size_t fused_dim, std::uint64_t seed,
                                        const std::string& path) {
  return HighFusionBlock{DenseLayer::create(visual_dim, fused_dim, seed, path + ".visual"),
                         DenseLayer::create(dim_aux, fused_dim, seed, path + ".aux")};
}

void HighFusionBlock::collect(const std::string& prefix, NamedTensors& params) const {
  visual_map.collect(prefix + ".visual", params);
  aux_map.collect(prefix + ".aux", params);
}

Tensor high_level_fuse(const HighFusionBlock& block, const Tensor& visual, const Tensor& aux) {
  if (visual.rank() != 2 || visual.dim(1) != block.visual_map.weight.dim(1)) {
    throw ShapeError("high fusion: visual width does not match block");
  }
  if (aux.rank() != 2 || aux.dim(1) != block.aux_map.weight.dim(1)) {
    throw ShapeError("high fusion: aux width does not match block");
  }
  return mul(tanh(block.visual_map(visual)), tanh(block.aux_map(aux)));
}

}  // namespace m2fn
