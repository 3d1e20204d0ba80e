#include "m2fn/grad_suite.hpp"

#include <algorithm>
#include <cmath>

#include "m2fn/fusion.hpp"
#include "m2fn/ops.hpp"
#include "m2fn/random.hpp"

namespace m2fn {

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  SplitMix rng(seed);
  std::vector<double> v(element_count(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

// Magnitudes in [0.05, 1] with random signs, clear of the relu kink.
Tensor signed_away_from_zero(Shape shape, std::uint64_t seed) {
  SplitMix rng(seed);
  std::vector<double> v(element_count(shape));
  for (double& x : v) {
    x = rng.uniform(0.05, 1.0);
    if (rng.uniform() < 0.5) x = -x;
  }
  return Tensor(std::move(shape), std::move(v));
}

Tensor projection(const Tensor& x, std::uint64_t seed) {
  return sum(mul(x, random_tensor(x.shape(), seed)));
}

Tensor* find(NamedTensors& tensors, const std::string& name) {
  for (auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

void primitive_checks(std::uint64_t seed, std::vector<GradCheckEntry>& out) {
  auto s = [&](std::uint64_t k) { return derive_seed(seed, "prim" + std::to_string(k)); };
  auto add_entry = [&](const char* name, const std::function<Tensor()>& fn,
                       std::vector<Tensor> inputs) {
    out.push_back({std::string("primitive.") + name, grad_check(fn, std::move(inputs))});
  };

  Tensor x4 = random_tensor({2, 2, 5, 4}, s(1));
  Tensor kernel = random_tensor({3, 2, 3, 3}, s(2)), bias = random_tensor({3}, s(3));
  add_entry("conv2d", [&] { return projection(conv2d(x4, kernel, bias, 2, 1), s(4)); },
            {x4, kernel, bias});

  Tensor xb = random_tensor({3, 2, 2, 2}, s(5), -2.0, 2.0);
  Tensor gamma = random_tensor({2}, s(6)), beta = random_tensor({2}, s(7));
  RunningStats stats = RunningStats::create(2);
  add_entry("batch_norm",
            [&] { return projection(batch_norm(xb, gamma, beta, Mode::kTrain, stats), s(8)); },
            {xb, gamma, beta});

  Tensor xs = random_tensor({2, 3, 2, 2}, s(9)), sc = random_tensor({2, 3}, s(10)),
         sh = random_tensor({2, 3}, s(11));
  add_entry("sample_channel_affine",
            [&] { return projection(sample_channel_affine(xs, sc, sh), s(12)); }, {xs, sc, sh});

  Tensor xd = random_tensor({3, 4}, s(13)), w = random_tensor({2, 4}, s(14)),
         b = random_tensor({2}, s(15)), v = random_tensor({4}, s(16));
  add_entry("dense_affine", [&] { return projection(dense_affine(xd, w, b), s(17)); }, {xd, w, b});
  add_entry("add_row_vector", [&] { return projection(add_row_vector(xd, v), s(18)); }, {xd, v});

  Tensor xe = signed_away_from_zero({3, 5}, s(19));
  add_entry("relu", [&] { return projection(relu(xe), s(20)); }, {xe});
  add_entry("tanh", [&] { return projection(tanh(xe), s(21)); }, {xe});
  add_entry("softmax_lastdim", [&] { return projection(softmax_lastdim(xe), s(22)); }, {xe});
  add_entry("scale", [&] { return projection(scale(xe, 0.7), s(23)); }, {xe});
  add_entry("mean", [&] { return mean(mul(xe, xe)); }, {xe});

  Tensor xp = random_tensor({2, 2, 4, 4}, s(24));
  Tensor attn_logits = random_tensor({2, 16}, s(28));
  add_entry("max_pool2d", [&] { return projection(max_pool2d(xp), s(25)); }, {xp});
  add_entry("spatial_mean", [&] { return projection(spatial_mean(xp), s(26)); }, {xp});
  add_entry("reshape", [&] { return projection(reshape(xp, {4, 16}), s(27)); }, {xp});
  add_entry("attention_pool",
            [&] { return projection(attention_pool(xp, softmax_lastdim(attn_logits)), s(29)); },
            {xp, attn_logits});

  Tensor a = random_tensor({2, 3}, s(30)), c = random_tensor({2, 3}, s(31)),
         d = random_tensor({2, 2}, s(35));
  add_entry("add", [&] { return projection(add(a, c), s(32)); }, {a, c});
  add_entry("sub", [&] { return projection(sub(a, c), s(33)); }, {a, c});
  add_entry("mul", [&] { return projection(mul(a, c), s(34)); }, {a, c});
  add_entry("concat", [&] { return projection(concat({a, d}, 1), s(36)); }, {a, d});
  add_entry("replicate_spatial", [&] { return projection(replicate_spatial(a, 2, 3), s(37)); },
            {a});
  add_entry("sum", [&] { return sum(mul(a, a)); }, {a});
}

}  // namespace

MicroProblem micro_problem(HeadKind head, Toggles toggles, std::uint64_t seed) {
  MicroProblem p;
  ModelConfig& c = p.config;
  c.image_size = 8;
  c.backbone = {{4, 3, 1, true}, {6, 3, 1, false}};
  c.cbn_hidden = 5;
  c.attn_hidden = 6;
  c.high_dim = 7;
  c.dim_aux = 4;
  c.head = head;
  c.toggles = toggles;
  c.seed = derive_seed(seed, "micro.model");

  Dataset& d = p.data;
  d.image_size = 8;
  d.dim_aux = 4;
  d.bucket_values = ScoreDistribution::rating_values();
  SplitMix rng(derive_seed(seed, "micro.data"));
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> img(3 * 64);
    for (double& v : img) v = rng.uniform(-1.0, 1.0);
    d.images.push_back(std::move(img));
    d.image_ids.push_back("micro" + std::to_string(i));
    Sample s;
    s.image = i;
    s.aux.resize(4);
    for (double& v : s.aux) v = rng.uniform(-1.0, 1.0);
    s.y = rng.uniform(0.05, 0.5);
    s.w = rng.uniform(0.5, 2.0);
    s.target_dist.resize(10);
    double total = 0.0;
    for (double& v : s.target_dist) total += (v = rng.uniform(0.01, 1.0));
    for (double& v : s.target_dist) v /= total;
    d.samples.push_back(std::move(s));
  }
  return p;
}

void prepare_for_grad_check(Model& model, const Dataset& data, std::uint64_t seed) {
  NamedTensors params = model.parameters();
  for (auto& [name, t] : params) {
    if (name.rfind("cbn.delta", 0) == 0) {
      const Tensor r = random_tensor(t.shape(), derive_seed(seed, name), -0.3, 0.3);
      std::copy(r.values().begin(), r.values().end(), t.mutable_values().begin());
    }
  }
  Tensor* kernel = find(params, "attn.hidden.kernel");
  Tensor* bias = find(params, "attn.hidden.bias");
  if (kernel == nullptr || bias == nullptr) return;

  std::vector<std::size_t> all(data.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  auto [images, aux] = data.batch(all);
  NamedTensors buffers = model.buffers();
  std::vector<std::vector<double>> saved;
  for (const auto& [n, t] : buffers) saved.emplace_back(t.values().begin(), t.values().end());
  const Tensor features = model.backbone_features(images, aux, Mode::kTrain);
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    std::copy(saved[i].begin(), saved[i].end(), buffers[i].second.mutable_values().begin());
  }
  const Tensor joint = replicate_and_concat(features, aux);
  const std::size_t units = kernel->dim(0), in = kernel->dim(1);
  const std::size_t n = joint.dim(0), positions = joint.dim(2) * joint.dim(3);
  const auto k = kernel->values();
  const auto z = joint.values();
  auto b = bias->mutable_values();
  for (std::size_t u = 0; u < units; ++u) {
    std::vector<double> pre;
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t p = 0; p < positions; ++p) {
        double acc = 0.0;
        for (std::size_t c = 0; c < in; ++c) acc += k[u * in + c] * z[(s * in + c) * positions + p];
        pre.push_back(acc);
      }
    // Bias splits the widest gap in the middle half of the pre-activations.
    std::sort(pre.begin(), pre.end());
    std::size_t best = pre.size() / 2 - 1;
    for (std::size_t j = pre.size() / 4; j + 1 < 3 * pre.size() / 4; ++j) {
      if (pre[j + 1] - pre[j] > pre[best + 1] - pre[best]) best = j;
    }
    b[u] = -(pre[best] + pre[best + 1]) / 2.0;
  }
}

std::vector<GradCheckEntry> gradient_suite(std::uint64_t seed) {
  std::vector<GradCheckEntry> out;
  primitive_checks(seed, out);
  const std::vector<std::size_t> both = {0, 1};
  for (LossKind kind : {LossKind::kWeightedMse, LossKind::kKld, LossKind::kEmd}) {
    const HeadKind head = kind == LossKind::kWeightedMse ? HeadKind::kScalar : HeadKind::kDistribution;
    for (const Toggles& t : ablation_rows()) {
      MicroProblem p = micro_problem(head, t, seed);
      Model model(p.config);
      prepare_for_grad_check(model, p.data, seed);
      auto [images, aux] = p.data.batch(both);
      std::vector<Tensor> inputs = {images};
      for (auto& [name, param] : model.parameters()) inputs.push_back(param);
      const double err = grad_check(
          [&] { return batch_loss(model.forward(images, aux, Mode::kTrain), p.data, both, kind); },
          inputs);
      out.push_back({"model." + t.code() + "." + loss_name(kind), err});
    }
  }
  return out;
}

}  // namespace m2fn
