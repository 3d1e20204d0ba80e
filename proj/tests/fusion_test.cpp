#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "m2fn/errors.hpp"
#include "m2fn/fusion.hpp"
#include "m2fn/grad_check.hpp"
#include "test_util.hpp"

namespace m2fn {
namespace {

using testing::projection;
using testing::random_tensor;

void randomize(DenseLayer& layer, std::uint64_t seed) {
  layer.weight = random_tensor(layer.weight.shape(), seed);
  layer.bias = random_tensor(layer.bias.shape(), seed + 1);
}

void randomize(ConvLayer& layer, std::uint64_t seed) {
  layer.kernel = random_tensor(layer.kernel.shape(), seed);
  layer.bias = random_tensor(layer.bias.shape(), seed + 1);
}

std::vector<double> dense_oracle(const std::vector<double>& x, std::size_t rows,
                                 const DenseLayer& layer) {
  const std::size_t in = layer.weight.dim(1), out = layer.weight.dim(0);
  std::vector<double> y(rows * out);
  for (std::size_t n = 0; n < rows; ++n)
    for (std::size_t o = 0; o < out; ++o) {
      double acc = layer.bias.values()[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[n * in + i] * layer.weight.values()[o * in + i];
      y[n * out + o] = acc;
    }
  return y;
}

TEST(Cbn, ZeroDeltaIsBitIdenticalToBatchNorm) {
  CbnBlock block = CbnBlock::create(4, 5, 8, 7);
  block.base.gamma = random_tensor({4}, 70, 0.5, 1.5);
  block.base.beta = random_tensor({4}, 71);
  const Tensor x = random_tensor({3, 4, 3, 3}, 72, -2.0, 2.0);
  const Tensor aux = random_tensor({3, 5}, 73);
  RunningStats stats = RunningStats::create(4);
  const Tensor want = batch_norm(x, block.base.gamma, block.base.beta, Mode::kTrain, stats);
  const Tensor got = cbn_forward(block, x, aux, Mode::kTrain);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(got.values()[i], want.values()[i]);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(block.base.stats.mean.values()[c], stats.mean.values()[c]);
    EXPECT_EQ(block.base.stats.var.values()[c], stats.var.values()[c]);
  }
  const Tensor want_eval = batch_norm(x, block.base.gamma, block.base.beta, Mode::kEval, stats);
  const Tensor got_eval = cbn_forward(block, x, aux, Mode::kEval);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(got_eval.values()[i], want_eval.values()[i]);
}

TEST(Cbn, ConditioningDependsOnDeltaMlp) {
  const Tensor img = random_tensor({1, 2, 3, 3}, 74);
  const Tensor x = concat({img, img}, 0);
  const Tensor aux({2, 3}, {1.0, 0.0, 0.5, -0.3, 0.8, 0.1});
  CbnBlock zero = CbnBlock::create(2, 3, 6, 9);
  const Tensor same = cbn_forward(zero, x, aux, Mode::kTrain);
  for (std::size_t i = 0; i < 18; ++i) EXPECT_EQ(same.values()[i], same.values()[18 + i]);

  CbnBlock live = CbnBlock::create(2, 3, 6, 9);
  randomize(live.delta_gamma, 75);
  randomize(live.delta_beta, 77);
  const Tensor differ = cbn_forward(live, x, aux, Mode::kTrain);
  bool any = false;
  for (std::size_t i = 0; i < 18; ++i) any |= differ.values()[i] != differ.values()[18 + i];
  EXPECT_TRUE(any);
}

TEST(Cbn, MatchesPerSampleFormula) {
  CbnBlock block = CbnBlock::create(4, 3, 5, 11);
  randomize(block.delta_gamma, 80);
  randomize(block.delta_beta, 82);
  block.base.gamma = random_tensor({4}, 84, 0.5, 1.5);
  block.base.beta = random_tensor({4}, 85);
  const Tensor x = random_tensor({2, 4, 3, 3}, 86, -2.0, 2.0);
  const Tensor aux = random_tensor({2, 3}, 87);
  const Tensor y = cbn_forward(block, x, aux, Mode::kTrain);

  std::vector<double> a(aux.values().begin(), aux.values().end());
  auto h = dense_oracle(a, 2, block.hidden);
  for (double& v : h) v = std::max(v, 0.0);
  const auto dg = dense_oracle(h, 2, block.delta_gamma);
  const auto db = dense_oracle(h, 2, block.delta_beta);
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0.0, v = 0.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 9; ++p) m += x.values()[(n * 4 + c) * 9 + p];
    m /= 18.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 9; ++p) v += std::pow(x.values()[(n * 4 + c) * 9 + p] - m, 2);
    v /= 18.0;
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t p = 0; p < 9; ++p) {
        const double xh = (x.values()[(n * 4 + c) * 9 + p] - m) / std::sqrt(v + kBatchNormEps);
        const double want = (block.base.gamma.values()[c] + dg[n * 4 + c]) * xh +
                            block.base.beta.values()[c] + db[n * 4 + c];
        EXPECT_NEAR(y.values()[(n * 4 + c) * 9 + p], want, 1e-10);
      }
  }
}

TEST(Cbn, AuxWidthMismatchIsSchemaError) {
  CbnBlock block = CbnBlock::create(2, 3, 4, 1);
  EXPECT_THROW(cbn_forward(block, random_tensor({2, 2, 2, 2}, 1), random_tensor({2, 4}, 2),
                           Mode::kTrain),
               SchemaError);
}

TEST(ReplicateAndConcat, ZeroWidthAuxIsIdentity) {
  const Tensor f = random_tensor({2, 3, 2, 2}, 90);
  const Tensor out = replicate_and_concat(f, Tensor());
  EXPECT_EQ(out.shape(), f.shape());
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(out.values()[i], f.values()[i]);
}

TEST(ReplicateAndConcat, SinglePosition) {
  const Tensor out = replicate_and_concat(Tensor({1, 1, 1, 1}, {7.0}), Tensor({1, 2}, {3.0, 5.0}));
  EXPECT_EQ(out.shape(), (Shape{1, 3, 1, 1}));
  EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()),
            (std::vector<double>{7.0, 3.0, 5.0}));
}

TEST(ReplicateAndConcat, PositionalDefinition) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const std::size_t n = 1 + seed % 3, c = 1 + seed % 4, d = 2 + seed % 2, h = 2 + seed % 3,
                      w = 1 + seed % 2;
    const Tensor f = random_tensor({n, c, h, w}, 91 + seed);
    const Tensor a = random_tensor({n, d}, 191 + seed);
    const Tensor out = replicate_and_concat(f, a);
    ASSERT_EQ(out.shape(), (Shape{n, c + d, h, w}));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < c + d; ++k)
        for (std::size_t p = 0; p < h * w; ++p) {
          const double want =
              k < c ? f.values()[(i * c + k) * h * w + p] : a.values()[i * d + (k - c)];
          EXPECT_EQ(out.values()[(i * (c + d) + k) * h * w + p], want);
        }
  }
  EXPECT_THROW(replicate_and_concat(random_tensor({2, 1, 2, 2}, 1), random_tensor({3, 2}, 2)),
               ShapeError);
}

TEST(SpatialAttention, ConstantLogitsGiveSpatialMean) {
  SpatialAttentionBlock block = SpatialAttentionBlock::create(3, 2, 4, 5);
  block.logit.kernel = Tensor::zeros(block.logit.kernel.shape());
  block.logit.bias = Tensor::full({1}, 0.37);
  const Tensor f = random_tensor({2, 3, 3, 2}, 100);
  const auto out = spatial_attention(block, f, random_tensor({2, 2}, 101));
  for (double v : out.attn.values()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
  const Tensor m = spatial_mean(f);
  for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(out.pooled.values()[i], m.values()[i], 1e-10);
}

TEST(SpatialAttention, DominantLogitSelectsThatPosition) {
  SpatialAttentionBlock block = SpatialAttentionBlock::create(2, 1, 1, 5);
  // hidden = relu(25 * channel0); logit = hidden.
  block.hidden.kernel = Tensor({1, 3, 1, 1}, {25.0, 0.0, 0.0});
  block.hidden.bias = Tensor::zeros({1});
  block.logit.kernel = Tensor({1, 1, 1, 1}, {1.0});
  block.logit.bias = Tensor::zeros({1});
  std::vector<double> fv(2 * 4, 0.0);
  fv[2] = 1.0;   // channel 0, position 2
  fv[4 + 2] = -4.5;  // channel 1, position 2
  fv[4 + 0] = 3.0;
  const auto out = spatial_attention(block, Tensor({1, 2, 2, 2}, fv), Tensor({1, 1}, {0.2}));
  EXPECT_GT(out.attn.values()[2], 1.0 - 1e-9);
  EXPECT_NEAR(out.pooled.values()[0], 1.0, 1e-9);
  EXPECT_NEAR(out.pooled.values()[1], -4.5, 1e-9);
}

TEST(SpatialAttention, MatchesBruteForceWeightedSum) {
  const std::size_t n = 2, c = 3, d = 2, hd = 4, s = 4;
  SpatialAttentionBlock block = SpatialAttentionBlock::create(c, d, hd, 5);
  randomize(block.hidden, 110);
  randomize(block.logit, 112);
  const Tensor f = random_tensor({n, c, 2, 2}, 114);
  const Tensor a = random_tensor({n, d}, 115);
  const auto out = spatial_attention(block, f, a);
  const auto hk = block.hidden.kernel.values(), hb = block.hidden.bias.values();
  const auto lk = block.logit.kernel.values(), lb = block.logit.bias.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(s);
    for (std::size_t p = 0; p < s; ++p) {
      std::vector<double> z;
      for (std::size_t k = 0; k < c; ++k) z.push_back(f.values()[(i * c + k) * s + p]);
      for (std::size_t k = 0; k < d; ++k) z.push_back(a.values()[i * d + k]);
      double l = lb[0];
      for (std::size_t u = 0; u < hd; ++u) {
        double h = hb[u];
        for (std::size_t k = 0; k < c + d; ++k) h += hk[u * (c + d) + k] * z[k];
        l += lk[u] * std::max(h, 0.0);
      }
      logits[p] = l;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double& l : logits) total += (l = std::exp(l - mx));
    double row = 0.0;
    for (std::size_t p = 0; p < s; ++p) {
      EXPECT_NEAR(out.attn.values()[i * s + p], logits[p] / total, 1e-12);
      row += out.attn.values()[i * s + p];
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
    for (std::size_t k = 0; k < c; ++k) {
      double want = 0.0;
      for (std::size_t p = 0; p < s; ++p) want += logits[p] / total * f.values()[(i * c + k) * s + p];
      EXPECT_NEAR(out.pooled.values()[i * c + k], want, 1e-10);
    }
  }
}

TEST(SpatialAttention, PermutingPositionsPermutesLogitsOnly) {
  SpatialAttentionBlock block = SpatialAttentionBlock::create(3, 2, 6, 21);
  const Tensor f = random_tensor({2, 3, 3, 3}, 120);
  const Tensor a = random_tensor({2, 2}, 121);
  const std::vector<std::size_t> perm = {4, 0, 8, 2, 7, 1, 5, 3, 6};
  std::vector<double> pv(f.size());
  for (std::size_t nc = 0; nc < 6; ++nc)
    for (std::size_t p = 0; p < 9; ++p) pv[nc * 9 + p] = f.values()[nc * 9 + perm[p]];
  const auto base = spatial_attention(block, f, a);
  const auto moved = spatial_attention(block, Tensor(f.shape(), pv), a);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t p = 0; p < 9; ++p)
      EXPECT_NEAR(moved.logits.values()[i * 9 + p], base.logits.values()[i * 9 + perm[p]], 1e-12);
  EXPECT_LT(testing::max_abs_diff(base.pooled.values(), moved.pooled.values()), 1e-12);
}

TEST(SpatialAttention, LogitShiftLeavesAttentionUnchanged) {
  SpatialAttentionBlock block = SpatialAttentionBlock::create(2, 2, 3, 31);
  const Tensor f = random_tensor({2, 2, 2, 3}, 130);
  const Tensor a = random_tensor({2, 2}, 131);
  const auto base = spatial_attention(block, f, a);
  block.logit.bias = Tensor({1}, {block.logit.bias.values()[0] + 8.5});
  const auto shifted = spatial_attention(block, f, a);
  EXPECT_LT(testing::max_abs_diff(base.attn.values(), shifted.attn.values()), 1e-12);
  for (double v : shifted.attn.values()) EXPECT_GE(v, 0.0);
}

TEST(HighFusion, ClosedAuxGateGivesZero) {
  HighFusionBlock block = HighFusionBlock::create(3, 2, 4, 41);
  block.aux_map = DenseLayer::zeros(2, 4);
  const Tensor out = high_level_fuse(block, random_tensor({3, 3}, 140), random_tensor({3, 2}, 141));
  for (double v : out.values()) EXPECT_EQ(v, 0.0);
}

TEST(HighFusion, SaturatesBelowOne) {
  HighFusionBlock block{DenseLayer{Tensor({1, 1}, {1.0}), Tensor::zeros({1})},
                        DenseLayer{Tensor({1, 1}, {1.0}), Tensor::zeros({1})}};
  const double v = high_level_fuse(block, Tensor({1, 1}, {9.0}), Tensor({1, 1}, {9.0})).item();
  EXPECT_GT(v, 0.9999999);
  EXPECT_LT(v, 1.0);
}

TEST(HighFusion, MatchesFormulaAndStaysInsideUnitInterval) {
  HighFusionBlock block = HighFusionBlock::create(3, 2, 5, 43);
  randomize(block.visual_map, 150);
  randomize(block.aux_map, 152);
  const Tensor v = random_tensor({4, 3}, 154, -3.0, 3.0);
  const Tensor a = random_tensor({4, 2}, 155, -3.0, 3.0);
  const Tensor out = high_level_fuse(block, v, a);
  const auto pv = dense_oracle({v.values().begin(), v.values().end()}, 4, block.visual_map);
  const auto pa = dense_oracle({a.values().begin(), a.values().end()}, 4, block.aux_map);
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_NEAR(out.values()[i], std::tanh(pv[i]) * std::tanh(pa[i]), 1e-12);
    EXPECT_LT(std::abs(out.values()[i]), 1.0);
  }
  EXPECT_THROW(high_level_fuse(block, random_tensor({4, 2}, 1), a), ShapeError);
}

TEST(FusionGradients, AllThreeBlocksEndToEnd) {
  CbnBlock cbn = CbnBlock::create(3, 2, 4, 51);
  randomize(cbn.delta_gamma, 160);
  randomize(cbn.delta_beta, 162);
  Tensor x = random_tensor({3, 3, 2, 2}, 164, -2.0, 2.0);
  Tensor aux = random_tensor({3, 2}, 165);
  NamedTensors params;
  cbn.collect("cbn", params);
  std::vector<Tensor> inputs = {x, aux};
  for (auto& [name, t] : params) inputs.push_back(t);
  EXPECT_LT(grad_check([&] { return projection(cbn_forward(cbn, x, aux, Mode::kTrain), 166); },
                       inputs),
            1e-4);

  SpatialAttentionBlock att = SpatialAttentionBlock::create(3, 2, 5, 52);
  NamedTensors ap;
  att.collect("attn", ap);
  inputs = {x, aux};
  for (auto& [name, t] : ap) inputs.push_back(t);
  EXPECT_LT(grad_check([&] { return projection(spatial_attention(att, x, aux).pooled, 167); },
                       inputs),
            1e-4);

  HighFusionBlock high = HighFusionBlock::create(3, 2, 4, 53);
  Tensor v = random_tensor({3, 3}, 168);
  NamedTensors hp;
  high.collect("high", hp);
  inputs = {v, aux};
  for (auto& [name, t] : hp) inputs.push_back(t);
  EXPECT_LT(grad_check([&] { return projection(high_level_fuse(high, v, aux), 169); }, inputs),
            1e-4);
}

}  // namespace
}  // namespace m2fn
