#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <string_view>
#include <vector>

#include "m2fn/fusion.hpp"
#include "m2fn/objectives.hpp"

namespace m2fn {

struct ConvStage {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool pool = true;  // 2x2 max-pool after the activation
};

// Table-4 style module switches. low/att/high require aux.
struct Toggles {
  bool aux = true;
  bool low = true;
  bool att = true;
  bool high = true;

  // "O" / "x" per module in Aux Low Att High order, e.g. "OOxx".
  std::string code() const;
  static Toggles parse(std::string_view spec);  // "aux,low" or a 4-char code
  bool operator==(const Toggles&) const = default;
};

// The eight rows of the module ablation grid, in table order.
std::vector<Toggles> ablation_rows();

enum class HeadKind { kScalar, kDistribution };

struct ModelConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 64;
  std::vector<ConvStage> backbone = {{16, 3, 1, true}, {32, 3, 1, true}, {64, 3, 1, true},
                                     {64, 3, 1, true}};
  std::size_t cbn_hidden = 256;
  std::size_t attn_hidden = 512;
  std::size_t high_dim = 1024;
  Toggles toggles;
  HeadKind head = HeadKind::kScalar;
  std::size_t buckets = 10;
  std::size_t dim_aux = 0;
  std::uint64_t seed = 0;

  // Throws ConfigError on invalid toggle combinations or sizes.
  void validate() const;
  // Spatial extent of the final feature map.
  std::size_t feature_extent() const;
  std::size_t feature_channels() const { return backbone.back().out_channels; }

  // Widths (cbn, attn, high) of the named preset: "ava-like" -> 64/512/512,
  // "realad-100" / "realad-500" -> 256/512/1024.
  void apply_preset(std::string_view preset);
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// Full multi-step fusion network:
//   conv1 -> (CBN | BN) -> relu -> [pool] -> stages 2..n (conv, BN, relu, [pool])
//   -> (spatial attention | global average pool)
//   -> (high-level fusion | concat aux | identity)
//   -> dense(high_dim) -> relu -> dense(1 | buckets) [-> softmax]
class Model {
 public:
  explicit Model(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  // images [N,C,H,W], aux [N,dim_aux] (ignored and may be empty when aux is
  // off). Returns [N,1] scores or [N,buckets] softmax rows.
  Tensor forward(const Tensor& images, const Tensor& aux, Mode mode);

  // Final backbone feature map [N,C,h,w] (after the last stage's pooling).
  Tensor backbone_features(const Tensor& images, const Tensor& aux, Mode mode);

  // Attention rows [N,H*W] from the last forward when att is on.
  const Tensor& last_attention() const { return last_attention_; }

  NamedTensors parameters() const;
  NamedTensors buffers() const;
  // parameters followed by buffers; the checkpoint payload.
  NamedTensors state() const;

  void save(const std::string& path) const;
  static Model load(const std::string& path);

 private:
  ModelConfig config_;
  std::vector<ConvLayer> convs_;
  std::vector<BatchNormLayer> norms_;  // index 0 unused when low is on
  CbnBlock cbn_;
  SpatialAttentionBlock attention_;
  HighFusionBlock high_;
  DenseLayer head_hidden_;
  DenseLayer head_out_;
  Tensor last_attention_;
};

std::vector<Prediction> to_predictions(const Tensor& output, HeadKind head,
                                       const std::vector<double>& bucket_values);

}  // namespace m2fn
