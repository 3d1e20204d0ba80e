#include "m2fn/model.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>

#include "m2fn/checkpoint.hpp"
#include "m2fn/errors.hpp"

namespace m2fn {

namespace {

template <typename F>
auto in_layer(const std::string& layer, F&& f) {
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(layer + ": " + e.what());
  }
}

std::string stage_name(std::size_t i) { return "backbone.stage" + std::to_string(i); }

}  // namespace

std::string Toggles::code() const {
  std::string s;
  for (bool b : {aux, low, att, high}) s += b ? 'O' : 'x';
  return s;
}

Toggles Toggles::parse(std::string_view spec) {
  Toggles t{false, false, false, false};
  if (spec.size() == 4 && spec.find_first_not_of("OoXx") == std::string_view::npos) {
    t.aux = spec[0] == 'O' || spec[0] == 'o';
    t.low = spec[1] == 'O' || spec[1] == 'o';
    t.att = spec[2] == 'O' || spec[2] == 'o';
    t.high = spec[3] == 'O' || spec[3] == 'o';
    return t;
  }
  if (spec == "none" || spec.empty()) return t;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const std::size_t end = std::min(spec.find(',', start), spec.size());
    const std::string_view item = spec.substr(start, end - start);
    if (item == "aux") t.aux = true;
    else if (item == "low") t.low = true;
    else if (item == "att") t.att = true;
    else if (item == "high") t.high = true;
    else if (item == "all") t = Toggles{};
    else throw ConfigError("unknown toggle '" + std::string(item) + "'");
    start = end + 1;
  }
  return t;
}

std::vector<Toggles> ablation_rows() {
  return {{false, false, false, false}, {true, false, false, false}, {true, true, false, false},
          {true, false, true, false},   {true, false, false, true},  {true, true, true, false},
          {true, true, false, true},    {true, true, true, true}};
}

void ModelConfig::validate() const {
  if (!toggles.aux && (toggles.low || toggles.att || toggles.high)) {
    throw ConfigError("toggles " + toggles.code() + ": low/att/high require aux");
  }
  if (toggles.aux && dim_aux == 0) throw ConfigError("aux enabled but dim_aux is 0");
  if (backbone.empty()) throw ConfigError("backbone needs at least one stage");
  if (head == HeadKind::kDistribution && buckets != 10) {
    throw ConfigError("distribution head uses 10 buckets");
  }
  if (in_channels == 0 || image_size == 0) throw ConfigError("empty input geometry");
  if (cbn_hidden == 0 || attn_hidden == 0 || high_dim == 0) {
    throw ConfigError("hidden widths must be positive");
  }
  for (const ConvStage& s : backbone) {
    if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0) {
      throw ConfigError("conv stage sizes must be positive");
    }
  }
  if (feature_extent() == 0) throw ConfigError("backbone reduces the image to nothing");
}

std::size_t ModelConfig::feature_extent() const {
  std::size_t extent = image_size;
  for (const ConvStage& s : backbone) {
    const std::size_t pad = s.kernel / 2;
    if (s.kernel > extent + 2 * pad) return 0;
    extent = (extent + 2 * pad - s.kernel) / s.stride + 1;
    if (s.pool) {
      if (extent < 2) return 0;
      extent = (extent - 2) / 2 + 1;
    }
  }
  return extent;
}

void ModelConfig::apply_preset(std::string_view preset) {
  if (preset == "ava-like") {
    cbn_hidden = 64;
    attn_hidden = 512;
    high_dim = 512;
  } else if (preset == "realad-100" || preset == "realad-500") {
    cbn_hidden = 256;
    attn_hidden = 512;
    high_dim = 1024;
  } else {
    throw ConfigError("unknown preset '" + std::string(preset) + "'");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const ConvStage& s : c.backbone) {
    stages.push_back({{"out_channels", s.out_channels},
                      {"kernel", s.kernel},
                      {"stride", s.stride},
                      {"pool", s.pool}});
  }
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"image_size", c.image_size},
                     {"backbone", stages},
                     {"cbn_hidden", c.cbn_hidden},
                     {"attn_hidden", c.attn_hidden},
                     {"high_dim", c.high_dim},
                     {"toggles", c.toggles.code()},
                     {"head", c.head == HeadKind::kScalar ? "scalar" : "distribution"},
                     {"buckets", c.buckets},
                     {"dim_aux", c.dim_aux},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.backbone.clear();
  for (const auto& s : j.at("backbone")) {
    c.backbone.push_back({s.at("out_channels").get<std::size_t>(), s.at("kernel").get<std::size_t>(),
                          s.at("stride").get<std::size_t>(), s.at("pool").get<bool>()});
  }
  c.cbn_hidden = j.at("cbn_hidden").get<std::size_t>();
  c.attn_hidden = j.at("attn_hidden").get<std::size_t>();
  c.high_dim = j.at("high_dim").get<std::size_t>();
  c.toggles = Toggles::parse(j.at("toggles").get<std::string>());
  c.head = j.at("head").get<std::string>() == "scalar" ? HeadKind::kScalar : HeadKind::kDistribution;
  c.buckets = j.at("buckets").get<std::size_t>();
  c.dim_aux = j.at("dim_aux").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& t = config_.toggles;
  const std::uint64_t seed = config_.seed;
  std::size_t in = config_.in_channels;
  for (std::size_t i = 0; i < config_.backbone.size(); ++i) {
    const ConvStage& s = config_.backbone[i];
    convs_.push_back(ConvLayer::create(in, s.out_channels, s.kernel, s.stride, s.kernel / 2, seed,
                                       stage_name(i) + ".conv"));
    norms_.push_back(BatchNormLayer::create(s.out_channels));
    in = s.out_channels;
  }
  const std::size_t c = config_.feature_channels();
  if (t.low) {
    cbn_ = CbnBlock::create(config_.backbone.front().out_channels, config_.dim_aux,
                            config_.cbn_hidden, seed, "cbn");
  }
  if (t.att) {
    attention_ = SpatialAttentionBlock::create(c, config_.dim_aux, config_.attn_hidden, seed, "attn");
  }
  std::size_t head_in = c;
  if (t.high) {
    high_ = HighFusionBlock::create(c, config_.dim_aux, config_.high_dim, seed, "high");
    head_in = config_.high_dim;
  } else if (t.aux) {
    head_in = c + config_.dim_aux;
  }
  const std::size_t out = config_.head == HeadKind::kScalar ? 1 : config_.buckets;
  head_hidden_ = DenseLayer::create(head_in, config_.high_dim, seed, "head.hidden");
  head_out_ = DenseLayer::create(config_.high_dim, out, seed, "head.out");
}

Tensor Model::backbone_features(const Tensor& images, const Tensor& aux, Mode mode) {
  const auto& t = config_.toggles;
  Tensor x = images;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const std::string name = stage_name(i);
    x = in_layer(name + ".conv", [&] { return convs_[i](x); });
    if (i == 0 && t.low) {
      x = in_layer("cbn", [&] { return cbn_forward(cbn_, x, aux, mode); });
    } else {
      x = in_layer(name + ".bn", [&] { return norms_[i](x, mode); });
    }
    x = in_layer(name + ".relu", [&] { return relu(x); });
    if (config_.backbone[i].pool) x = in_layer(name + ".pool", [&] { return max_pool2d(x); });
  }
  return x;
}

Tensor Model::forward(const Tensor& images, const Tensor& aux, Mode mode) {
  const auto& t = config_.toggles;
  if (images.rank() != 4 || images.dim(1) != config_.in_channels ||
      images.dim(2) != config_.image_size || images.dim(3) != config_.image_size) {
    throw ShapeError("model: images must be [N," + std::to_string(config_.in_channels) + "," +
                     std::to_string(config_.image_size) + "," +
                     std::to_string(config_.image_size) + "], got " +
                     shape_string(images.shape()));
  }
  if (t.aux) {
    if (!aux.defined() || aux.rank() != 2 || aux.dim(0) != images.dim(0) ||
        aux.dim(1) != config_.dim_aux) {
      throw SchemaError("model: aux must be [N," + std::to_string(config_.dim_aux) + "]");
    }
  }
  const Tensor x = backbone_features(images, aux, mode);
  Tensor visual;
  if (t.att) {
    AttentionOutput att = in_layer("attn", [&] { return spatial_attention(attention_, x, aux); });
    visual = att.pooled;
    last_attention_ = att.attn;
  } else {
    visual = in_layer("pool", [&] { return spatial_mean(x); });
  }
  Tensor joint;
  if (t.high) {
    joint = in_layer("high", [&] { return high_level_fuse(high_, visual, aux); });
  } else if (t.aux) {
    joint = in_layer("concat", [&] { return concat({visual, aux}, 1); });
  } else {
    joint = visual;
  }
  Tensor h = in_layer("head.hidden", [&] { return relu(head_hidden_(joint)); });
  Tensor out = in_layer("head.out", [&] { return head_out_(h); });
  if (config_.head == HeadKind::kDistribution) {
    out = in_layer("head.softmax", [&] { return softmax_lastdim(out); });
  }
  return out;
}

NamedTensors Model::parameters() const {
  NamedTensors p;
  const auto& t = config_.toggles;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    // Conv biases ahead of a norm layer stay fixed at zero; the mean
    // subtraction cancels them.
    p.emplace_back(stage_name(i) + ".conv.kernel", convs_[i].kernel);
    if (!(i == 0 && t.low)) norms_[i].collect(stage_name(i) + ".bn", p);
  }
  if (t.low) cbn_.collect("cbn", p);
  if (t.att) attention_.collect("attn", p);
  if (t.high) high_.collect("high", p);
  head_hidden_.collect("head.hidden", p);
  head_out_.collect("head.out", p);
  return p;
}

NamedTensors Model::buffers() const {
  NamedTensors b;
  const auto& t = config_.toggles;
  for (std::size_t i = 0; i < norms_.size(); ++i) {
    if (!(i == 0 && t.low)) norms_[i].collect_buffers(stage_name(i) + ".bn", b);
  }
  if (t.low) cbn_.collect_buffers("cbn", b);
  return b;
}

NamedTensors Model::state() const {
  NamedTensors s = parameters();
  NamedTensors b = buffers();
  s.insert(s.end(), b.begin(), b.end());
  return s;
}

void Model::save(const std::string& path) const {
  nlohmann::json meta = {{"model", config_}};
  save_checkpoint(path, state(), meta.dump());
}

Model Model::load(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  const auto meta = nlohmann::json::parse(ck.metadata);
  Model model(meta.at("model").get<ModelConfig>());
  NamedTensors targets = model.state();
  restore_tensors(ck, targets);
  return model;
}

std::vector<Prediction> to_predictions(const Tensor& output, HeadKind head,
                                       const std::vector<double>& bucket_values) {
  std::vector<Prediction> preds;
  const std::size_t n = output.dim(0);
  const auto v = output.values();
  if (head == HeadKind::kScalar) {
    for (std::size_t i = 0; i < n; ++i) preds.emplace_back(v[i]);
    return preds;
  }
  const std::size_t k = output.dim(1);
  if (bucket_values.size() != k) throw ContractError("bucket value count mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    ScoreDistribution d{std::vector<double>(v.begin() + i * k, v.begin() + (i + 1) * k),
                        bucket_values};
    preds.emplace_back(std::move(d));
  }
  return preds;
}

}  // namespace m2fn
