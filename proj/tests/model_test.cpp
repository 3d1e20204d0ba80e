#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "m2fn/checkpoint.hpp"
#include "m2fn/errors.hpp"
#include "m2fn/grad_check.hpp"
#include "m2fn/grad_suite.hpp"
#include "m2fn/model.hpp"
#include "m2fn/train.hpp"
#include "model_fixtures.hpp"

namespace m2fn {
namespace {

using testing::micro_config;
using testing::micro_dataset;
using testing::random_tensor;

const Toggles kAllOff{false, false, false, false};

TEST(Toggles, CodesAndParsing) {
  EXPECT_EQ(Toggles{}.code(), "OOOO");
  EXPECT_EQ(kAllOff.code(), "xxxx");
  EXPECT_EQ(Toggles::parse("aux,att"), (Toggles{true, false, true, false}));
  EXPECT_EQ(Toggles::parse("OxxO"), (Toggles{true, false, false, true}));
  EXPECT_EQ(Toggles::parse("none"), kAllOff);
  EXPECT_EQ(Toggles::parse("all"), Toggles{});
  EXPECT_THROW(Toggles::parse("aux,colour"), ConfigError);
}

TEST(Toggles, GridMatchesTableRows) {
  const auto rows = ablation_rows();
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows.front().code(), "xxxx");
  EXPECT_EQ(rows[1].code(), "Oxxx");
  EXPECT_EQ(rows.back().code(), "OOOO");
}

TEST(ModelConfig, InvalidCombinationsRejected) {
  ModelConfig c = micro_config();
  c.toggles = Toggles{false, true, false, false};
  EXPECT_THROW(Model{c}, ConfigError);
  c = micro_config(HeadKind::kDistribution);
  c.buckets = 5;
  EXPECT_THROW(Model{c}, ConfigError);
  c = micro_config();
  c.dim_aux = 0;
  EXPECT_THROW(Model{c}, ConfigError);
  c = micro_config();
  c.image_size = 1;
  EXPECT_THROW(Model{c}, ConfigError);
}

TEST(ModelConfig, AvaPresetWidthsReachParameterShapes) {
  ModelConfig c = micro_config();
  c.apply_preset("ava-like");
  EXPECT_EQ(c.cbn_hidden, 64u);
  EXPECT_EQ(c.attn_hidden, 512u);
  EXPECT_EQ(c.high_dim, 512u);
  const Model m(c);
  for (const auto& [name, t] : m.parameters()) {
    if (name == "cbn.hidden.weight") EXPECT_EQ(t.shape(), (Shape{64, 4}));
    if (name == "attn.hidden.kernel") EXPECT_EQ(t.shape(), (Shape{512, 10, 1, 1}));
    if (name == "high.visual.weight") EXPECT_EQ(t.shape(), (Shape{512, 6}));
    if (name == "head.hidden.weight") EXPECT_EQ(t.shape(), (Shape{512, 512}));
  }
  c.apply_preset("realad-500");
  EXPECT_EQ(c.cbn_hidden, 256u);
  EXPECT_EQ(c.high_dim, 1024u);
  EXPECT_THROW(c.apply_preset("imagenet"), ConfigError);
}

TEST(ModelConfig, JsonRoundTrip) {
  const ModelConfig c = micro_config(HeadKind::kDistribution, Toggles::parse("OxOx"));
  const nlohmann::json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Model, SameSeedGivesIdenticalParameters) {
  const Model a(micro_config()), b(micro_config());
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].first, pb[i].first);
    EXPECT_TRUE(std::equal(pa[i].second.values().begin(), pa[i].second.values().end(),
                           pb[i].second.values().begin()));
  }
  ModelConfig other = micro_config();
  other.seed = 18;
  const Model c(other);
  EXPECT_FALSE(std::equal(pa[0].second.values().begin(), pa[0].second.values().end(),
                          c.parameters()[0].second.values().begin()));
}

TEST(Model, ParameterPathsAreModuleScoped) {
  const Model m(micro_config());
  std::vector<std::string> names;
  for (const auto& [name, t] : m.parameters()) names.push_back(name);
  auto has = [&](const std::string& n) {
    return std::find(names.begin(), names.end(), n) != names.end();
  };
  EXPECT_TRUE(has("backbone.stage0.conv.kernel"));
  EXPECT_TRUE(has("cbn.delta_gamma.weight"));
  EXPECT_TRUE(has("attn.hidden.kernel"));
  EXPECT_TRUE(has("high.aux.weight"));
  EXPECT_TRUE(has("head.out.bias"));
  EXPECT_FALSE(has("backbone.stage0.bn.gamma"));
}

TEST(Model, AuxOffOutputIgnoresAux) {
  Model m(micro_config(HeadKind::kScalar, kAllOff));
  const Tensor img = random_tensor({3, 3, 8, 8}, 1);
  const Tensor a = m.forward(img, random_tensor({3, 4}, 2), Mode::kTrain);
  const Tensor b = m.forward(img, random_tensor({3, 4}, 3), Mode::kTrain);
  const Tensor c = m.forward(img, Tensor(), Mode::kEval);
  const Tensor d = m.forward(img, random_tensor({3, 4}, 4), Mode::kEval);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.values()[i], b.values()[i]);
    EXPECT_EQ(c.values()[i], d.values()[i]);
  }
}

TEST(Model, DistributionRowsAreNormalized) {
  Model m(micro_config(HeadKind::kDistribution));
  const Tensor out = m.forward(random_tensor({4, 3, 8, 8}, 5), random_tensor({4, 4}, 6), Mode::kTrain);
  ASSERT_EQ(out.shape(), (Shape{4, 10}));
  for (std::size_t n = 0; n < 4; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < 10; ++k) {
      EXPECT_GE(out.values()[n * 10 + k], 0.0);
      s += out.values()[n * 10 + k];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  EXPECT_EQ(m.last_attention().shape(), (Shape{4, 16}));
}

TEST(Model, GoldenMicroBatch) {
  // Frozen from the first run after the gradient checks passed.
  Model m(micro_config());
  const Dataset d = micro_dataset(3, 5);
  auto [img, aux] = d.batch({0, 1, 2});
  const Tensor out = m.forward(img, aux, Mode::kTrain);
  EXPECT_NEAR(out.values()[0], 0.15318298300603503, 1e-12);
  EXPECT_NEAR(out.values()[1], 0.44883959093598091, 1e-12);
  EXPECT_NEAR(out.values()[2], 0.0, 1e-12);
  Model md(micro_config(HeadKind::kDistribution));
  const Tensor dist = md.forward(img, aux, Mode::kTrain);
  EXPECT_NEAR(dist.values()[0], 0.12621287669569223, 1e-12);
  EXPECT_NEAR(dist.values()[13], 0.081829031496792853, 1e-12);
}

TEST(Model, BadInputsAreRejected) {
  Model m(micro_config());
  EXPECT_THROW(m.forward(random_tensor({2, 3, 9, 9}, 1), random_tensor({2, 4}, 2), Mode::kEval),
               ShapeError);
  EXPECT_THROW(m.forward(random_tensor({2, 3, 8, 8}, 1), random_tensor({2, 5}, 2), Mode::kEval),
               SchemaError);
}

TEST(Model, NumericFailureNamesTheLayer) {
  Model m(micro_config());
  for (double& v : m.parameters()[0].second.mutable_values()) v = 1e300;
  try {
    m.forward(Tensor::full({2, 3, 8, 8}, 1e300), random_tensor({2, 4}, 1), Mode::kEval);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("backbone.stage0.conv"), std::string::npos) << e.what();
  }
}

class FullModelGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(FullModelGradient, TwoSampleBatch) {
  const LossKind kind = parse_loss(GetParam());
  const HeadKind head = kind == LossKind::kWeightedMse ? HeadKind::kScalar : HeadKind::kDistribution;
  const std::vector<std::size_t> both = {0, 1};
  for (const Toggles& t : ablation_rows()) {
    MicroProblem p = micro_problem(head, t, 0);
    Model m(p.config);
    prepare_for_grad_check(m, p.data, 0);
    auto [img, aux] = p.data.batch(both);
    std::vector<Tensor> inputs = {img};
    for (auto& [name, param] : m.parameters()) inputs.push_back(param);
    const double err = grad_check(
        [&] { return batch_loss(m.forward(img, aux, Mode::kTrain), p.data, both, kind); }, inputs);
    EXPECT_LT(err, 1e-4) << t.code();
  }
}

TEST(FullModelGradient, PreparationGivesCbnDeltasValues) {
  MicroProblem p = micro_problem(HeadKind::kScalar, Toggles{}, 3);
  Model m(p.config);
  prepare_for_grad_check(m, p.data, 3);
  NamedTensors params = m.parameters();
  for (const auto& [name, t] : params) {
    if (name.rfind("cbn.delta", 0) == 0) {
      EXPECT_TRUE(std::any_of(t.values().begin(), t.values().end(), [](double v) { return v != 0.0; }));
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Losses, FullModelGradient, ::testing::Values("wmse", "kld", "emd"));

TEST(Checkpoint, RoundTripReproducesForwardBitForBit) {
  Model m(micro_config(HeadKind::kDistribution));
  const Dataset d = micro_dataset(6, 3);
  TrainOptions opt;
  opt.loss = LossKind::kKld;
  opt.epochs = 2;
  opt.batch_size = 3;
  train(m, d, opt);
  const auto path = std::filesystem::temp_directory_path() / "m2fn_model_test.ckpt";
  m.save(path.string());
  Model back = Model::load(path.string());
  auto [img, aux] = d.batch({0, 1, 2, 3, 4, 5});
  const Tensor a = m.forward(img, aux, Mode::kEval);
  const Tensor b = back.forward(img, aux, Mode::kEval);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.values()[i], b.values()[i]);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const Model m(micro_config());
  const std::string bytes = encode_checkpoint(m.state(), "{}");
  EXPECT_NO_THROW(decode_checkpoint(bytes));
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(decode_checkpoint(flipped), DataError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint(magic), DataError);
}

TEST(Checkpoint, RestoreRequiresExactNamesAndShapes) {
  const Model a(micro_config());
  const Checkpoint ck = decode_checkpoint(encode_checkpoint(a.state(), "{}"));
  Model other(micro_config(HeadKind::kScalar, Toggles::parse("Oxxx")));
  NamedTensors targets = other.state();
  EXPECT_THROW(restore_tensors(ck, targets), DataError);
}

TEST(Train, OneEpochOnFourSamplesReducesLoss) {
  Model m(micro_config());
  const Dataset d = micro_dataset(4, 11);
  TrainOptions opt;
  opt.epochs = 1;
  const TrainReport r = train(m, d, opt);
  EXPECT_EQ(opt.batch_size, 128u);
  EXPECT_EQ(TrainOptions{}.epochs, 100u);
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_LT(r.final_loss, r.initial_loss);
}

TEST(Train, DeterministicGivenSeed) {
  const Dataset d = micro_dataset(10, 12);
  TrainOptions opt;
  opt.epochs = 3;
  opt.batch_size = 4;
  opt.seed = 99;
  Model a(micro_config()), b(micro_config());
  const auto ra = train(a, d, opt, &d), rb = train(b, d, opt, &d);
  for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(ra.epochs[e].train_loss, rb.epochs[e].train_loss);
  EXPECT_EQ(ra.final_eval->sprc_mean, rb.final_eval->sprc_mean);
  const auto pa = a.state(), pb = b.state();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].second.values().begin(), pa[i].second.values().end(),
                           pb[i].second.values().begin()));
}

TEST(Train, LossHeadMismatchIsConfigError) {
  Model m(micro_config());
  TrainOptions opt;
  opt.loss = LossKind::kKld;
  EXPECT_THROW(train(m, micro_dataset(4, 1), opt), ConfigError);
  Model md(micro_config(HeadKind::kDistribution));
  opt.loss = LossKind::kWeightedMse;
  EXPECT_THROW(train(md, micro_dataset(4, 1), opt), ConfigError);
  EXPECT_THROW(parse_loss("huber"), ConfigError);
}

TEST(Ablate, GridRowsAndImageOnlyDeterminism) {
  const Dataset train_set = micro_dataset(8, 21), test_set = micro_dataset(6, 22);
  TrainOptions opt;
  opt.epochs = 2;
  opt.batch_size = 4;
  const auto rows = ablate_grid(micro_config(), train_set, test_set, opt, ablation_rows(), 2);
  ASSERT_EQ(rows.size(), 8u);
  EXPECT_EQ(rows.front().toggles.code(), "xxxx");
  EXPECT_EQ(rows.back().toggles.code(), "OOOO");
  Model image_only(micro_config(HeadKind::kScalar, kAllOff));
  const TrainReport r = train(image_only, train_set, opt, &test_set);
  EXPECT_EQ(rows.front().metrics.sprc_mean, r.final_eval->sprc_mean);
  EXPECT_EQ(rows.front().metrics.lcc_mean, r.final_eval->lcc_mean);
  EXPECT_EQ(rows.front().report.final_loss, r.final_loss);
}

}  // namespace
}  // namespace m2fn
