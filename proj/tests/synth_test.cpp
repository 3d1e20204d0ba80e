#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "m2fn/errors.hpp"
#include "m2fn/synth.hpp"

namespace m2fn::synth {
namespace {

GenConfig small(std::uint64_t seed, std::uint64_t records = 20000) {
  GenConfig c;
  c.n_images = 20;
  c.campaigns_per_image = 3;
  c.n_records = records;
  c.seed = seed;
  return c;
}

Aggregator aggregate_all(const GroundTruth& truth) {
  Aggregator agg;
  emit_records(truth, 0, truth.config.n_records, [&](ImpressionRecord&& r) { agg.add(r); });
  return agg;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Synth, SchemaWidth) {
  EXPECT_EQ(schema(GenConfig{}).dim_aux(), 53u);
}

TEST(Synth, SameSeedByteIdenticalOutputs) {
  const auto root = std::filesystem::temp_directory_path() / ("m2fn_synth_" + std::to_string(::getpid()));
  std::filesystem::remove_all(root);
  write(generate(small(3, 5000)), root / "a");
  write(generate(small(3, 5000)), root / "b");
  for (const char* f : {"records.jsonl", "truth.json", "schema.json", "titles/index.json",
                        "titles/vectors.bin", "images/img00007.ppm"}) {
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  write(generate(small(4, 5000)), root / "c");
  EXPECT_NE(slurp(root / "a" / "records.jsonl"), slurp(root / "c" / "records.jsonl"));

  std::ifstream in(root / "a" / "records.jsonl");
  ReadReport report;
  std::size_t count = 0;
  read_jsonl(in, [&](ImpressionRecord&&) { ++count; }, report);
  EXPECT_EQ(count, 5000u);
  EXPECT_TRUE(report.rejects.empty());
  std::filesystem::remove_all(root);
}

TEST(Synth, ShardingInvariant) {
  const auto g = generate(small(5, 3000));
  std::vector<ImpressionRecord> whole, sharded;
  emit_records(g.truth, 0, 3000, [&](ImpressionRecord&& r) { whole.push_back(r); });
  for (const auto& [a, b] : std::vector<std::pair<int, int>>{{1700, 3000}, {0, 611}, {611, 1700}}) {
    emit_records(g.truth, a, b, [&](ImpressionRecord&& r) { sharded.push_back(r); });
  }
  std::rotate(sharded.begin(), sharded.begin() + (3000 - 1700), sharded.end());
  EXPECT_EQ(whole, sharded);
  for (std::uint64_t r : {0u, 1u, 999u, 2999u}) EXPECT_EQ(make_record(g.truth, r), whole[r]);
}

TEST(Synth, CampaignRangesCoverRecords) {
  const auto g = generate(small(6, 12345));
  std::uint64_t next = 0;
  std::set<std::string> keys;
  for (const auto& c : g.truth.campaigns) {
    EXPECT_EQ(c.first_record, next);
    next += c.impressions;
    EXPECT_GT(c.ctr, 0.0);
    EXPECT_LT(c.ctr, 1.0);
    EXPECT_TRUE(keys.insert(group_key(g.truth.images[c.image].id, c.attributes)).second);
  }
  EXPECT_EQ(next, 12345u);
}

TEST(Synth, NullModelMatchesBaseCtr) {
  GenConfig c = GenConfig::null_model();
  c.n_images = 30;
  c.campaigns_per_image = 2;
  c.n_records = 60000;
  const auto g = generate(c);
  for (const auto& cam : g.truth.campaigns) EXPECT_EQ(cam.ctr, c.base_ctr);
  for (const auto& inst : aggregate_all(g.truth).finish(1)) {
    const double sigma = std::sqrt(c.base_ctr * (1 - c.base_ctr) / inst.w);
    EXPECT_LT(std::abs(inst.y - c.base_ctr), 4 * sigma) << inst.key();
  }
}

TEST(Synth, AgeSlopeGivesMonotoneBars) {
  GenConfig c;
  c.n_images = 100;
  c.campaigns_per_image = 10;
  c.n_records = 300000;
  c.seed = 11;
  for (auto& a : c.attributes) {
    if (a.name == "age") a.effects = {-0.02, -0.01, 0.0, 0.01, 0.02};
  }
  const auto g = generate(c);
  const auto bars = ctr_bars(aggregate_all(g.truth).finish(1), "age", c.attributes[1].levels);
  ASSERT_EQ(bars.size(), 5u);
  for (std::size_t i = 1; i < bars.size(); ++i) EXPECT_GT(bars[i].ctr, bars[i - 1].ctr) << i;
}

TEST(Synth, EffectsOutsideUnitIntervalRejected) {
  GenConfig c;
  c.base_ctr = 0.05;
  EXPECT_THROW(generate(c), ConfigError);
  c = GenConfig{};
  c.text_saliency = 0.9;
  EXPECT_THROW(c.validate(), ConfigError);
  c = GenConfig{};
  c.attributes[0].effects.pop_back();
  EXPECT_THROW(c.validate(), ConfigError);
  c = GenConfig{};
  c.attributes.erase(c.attributes.begin() + 5);
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_NO_THROW(GenConfig{}.validate());
}

TEST(Synth, AggregatesConvergeToTruth) {
  GenConfig c = small(8, 400000);
  const auto g = generate(c);
  const auto instances = aggregate_all(g.truth).finish(1);
  ASSERT_EQ(instances.size(), g.truth.campaigns.size());
  for (const auto& inst : instances) {
    const double p = true_ctr(g.truth, inst);
    EXPECT_LT(std::abs(inst.y - p), 3 * std::sqrt(p * (1 - p) / inst.w)) << inst.key();
  }
}

TEST(Synth, OracleEvalBounds) {
  GenConfig big = small(9, 2000000);
  big.n_images = 10;
  const auto g = generate(big);
  EXPECT_GT(oracle_eval(g.truth, aggregate_all(g.truth).finish(1)), 0.97);

  GenConfig c;
  c.n_images = 100;
  c.campaigns_per_image = 4;
  c.n_records = 40000;  // about 100 impressions per group
  const auto h = generate(c);
  const double s = oracle_eval(h.truth, aggregate_all(h.truth).finish(1));
  EXPECT_GT(s, 0.0);
  EXPECT_LT(s, 1.0);
}

TEST(Synth, TruthJsonRoundTrip) {
  const auto g = generate(small(10, 1000));
  const nlohmann::json j = g.truth;
  const GroundTruth back = j.get<GroundTruth>();
  EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
  EXPECT_EQ(back.mask(3), g.truth.mask(3));
}

TEST(Synth, ImagesCarryTextBlockAndBackground) {
  const auto g = generate(small(12, 100));
  std::size_t agree = 0;
  for (std::size_t i = 0; i < g.truth.images.size(); ++i) {
    const ImageTruth& t = g.truth.images[i];
    const Image& img = g.images.at(t.id);
    const auto mask = g.truth.mask(i);
    const std::size_t s = g.truth.config.image_size;
    std::size_t marked = std::count(mask.begin(), mask.end(), 1);
    EXPECT_EQ(marked, t.text.present ? 4u * 10u : 0u);
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) {
        if (!mask[y * s + x]) continue;
        EXPECT_NEAR(img.at(0, y, x), x % 2 == 0 ? 0.0 : 1.0, g.truth.config.pixel_noise + 1e-12);
      }
    agree += dominant_color(img).palette_index == t.background;
  }
  EXPECT_GE(agree, 18u);
}

}  // namespace
}  // namespace m2fn::synth
