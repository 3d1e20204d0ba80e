#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "m2fn/errors.hpp"
#include "m2fn/pipeline.hpp"
#include "m2fn/random.hpp"
#include "pipeline_oracles.hpp"

namespace m2fn {
namespace {

ImpressionRecord record(const std::string& id, AttributeMap attrs, bool clicked) {
  return ImpressionRecord{id, std::move(attrs), clicked};
}

std::vector<ImpressionRecord> repeated(std::size_t n, std::size_t clicked) {
  std::vector<ImpressionRecord> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(record("a", {{"age", "1"}}, i < clicked));
  return out;
}

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("m2fn_pipeline_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------- aggregate

TEST(Aggregate, HundredRecordsTwentyClicks) {
  const auto out = aggregate(repeated(100, 20), 100);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].y, 0.2);
  EXPECT_EQ(out[0].w, 100u);
  EXPECT_EQ(out[0].clicks, 20u);
}

TEST(Aggregate, ThresholdBoundary) {
  EXPECT_TRUE(aggregate(repeated(99, 20), 100).empty());
  EXPECT_EQ(aggregate(repeated(100, 20), 100).size(), 1u);
  EXPECT_TRUE(aggregate(repeated(499, 3), 500).empty());
  EXPECT_EQ(aggregate(repeated(500, 3), 500).size(), 1u);
}

TEST(Aggregate, MatchesGroupCountOracle) {
  const auto log = oracle::random_log(10000, 50, 42);
  for (const std::uint64_t threshold : {1u, 100u, 500u}) {
    const auto got = aggregate(log, threshold);
    const auto want = oracle::group_count(log, threshold);
    ASSERT_EQ(got.size(), want.size()) << threshold;
    std::map<std::pair<std::string, AttributeMap>, const AggregatedInstance*> index;
    for (const auto& inst : got) index[{inst.image_id, inst.attributes}] = &inst;
    for (const auto& g : want) {
      const auto it = index.find({g.image_id, g.attributes});
      ASSERT_NE(it, index.end());
      EXPECT_EQ(it->second->w, g.w);
      EXPECT_EQ(it->second->clicks, g.clicks);
      EXPECT_EQ(it->second->y, static_cast<double>(g.clicks) / static_cast<double>(g.w));
    }
  }
}

TEST(Aggregate, OutputSortedByKeyAndConserved) {
  const auto log = oracle::random_log(5000, 40, 7);
  const auto out = aggregate(log, 1);
  for (std::size_t i = 1; i < out.size(); ++i) EXPECT_LT(out[i - 1].key(), out[i].key());
  std::uint64_t w = 0, clicks = 0;
  for (const auto& inst : out) {
    w += inst.w;
    clicks += inst.clicks;
    EXPECT_GE(inst.y, 0.0);
    EXPECT_LE(inst.y, 1.0);
  }
  EXPECT_EQ(w, log.size());
  EXPECT_EQ(clicks, static_cast<std::uint64_t>(std::count_if(
                        log.begin(), log.end(), [](const auto& r) { return r.clicked; })));
}

TEST(Aggregate, ShardedMergeEqualsSinglePass) {
  const auto log = oracle::random_log(3000, 30, 9);
  Aggregator shards[3];
  for (std::size_t i = 0; i < log.size(); ++i) shards[fnv1a64(log[i].image_id) % 3].add(log[i]);
  Aggregator merged;
  for (const auto& s : shards) merged.merge(s);
  EXPECT_EQ(merged.records(), log.size());
  EXPECT_EQ(merged.finish(10), aggregate(log, 10));
}

TEST(Aggregate, ZeroThresholdRejected) {
  EXPECT_THROW(aggregate(repeated(3, 1), 0), ContractError);
}

// ---------------------------------------------------------------- readers

TEST(ReadJsonl, RejectsMalformedLinesAndContinues) {
  std::istringstream in(
      R"({"image_id":"a","attributes":{"age":"2"},"clicked":1})"
      "\n"
      "not json\n"
      "\n"
      R"({"image_id":"b","attributes":{"age":3},"clicked":false})"
      "\n"
      R"({"image_id":"c","attributes":{},"clicked":1})"
      "\n"
      R"({"image_id":"d","clicked":2})"
      "\n");
  std::vector<ImpressionRecord> got;
  ReadReport report;
  const std::vector<std::string> required{"age"};
  read_jsonl(in, [&](ImpressionRecord&& r) { got.push_back(std::move(r)); }, report, required);
  EXPECT_EQ(report.lines, 5u);
  EXPECT_EQ(report.accepted, 2u);
  ASSERT_EQ(report.rejects.size(), 3u);
  EXPECT_EQ(report.rejects[0].first, 2u);
  EXPECT_EQ(report.rejects[1].first, 5u);
  EXPECT_NE(report.rejects[1].second.find("age"), std::string::npos);
  EXPECT_EQ(report.rejects[2].first, 6u);
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0], record("a", {{"age", "2"}}, true));
  EXPECT_EQ(got[1], record("b", {{"age", "3"}}, false));
}

TEST(ReadJsonl, RoundTripsWriter) {
  const auto log = oracle::random_log(200, 10, 3);
  std::stringstream io;
  for (const auto& r : log) io << record_to_jsonl(r) << '\n';
  std::vector<ImpressionRecord> back;
  ReadReport report;
  read_jsonl(io, [&](ImpressionRecord&& r) { back.push_back(std::move(r)); }, report);
  EXPECT_TRUE(report.rejects.empty());
  EXPECT_EQ(back, log);
}

TEST(ReadCsv, HeaderQuotingAndRejects) {
  std::istringstream in(
      "image_id,age,clicked,title\n"
      "a,2,1,\"Hello, \"\"world\"\"\"\n"
      "b,3,0\n"
      "c,4,maybe,x\n"
      "d,5,true,y\n");
  std::vector<ImpressionRecord> got;
  ReadReport report;
  read_csv(in, [&](ImpressionRecord&& r) { got.push_back(std::move(r)); }, report);
  EXPECT_EQ(report.accepted, 2u);
  ASSERT_EQ(report.rejects.size(), 2u);
  EXPECT_EQ(report.rejects[0].first, 3u);
  EXPECT_EQ(report.rejects[1].first, 4u);
  ASSERT_EQ(got.size(), 2u);
  EXPECT_EQ(got[0].attributes.at("title"), "Hello, \"world\"");
  EXPECT_TRUE(got[0].clicked);
  EXPECT_EQ(got[1].image_id, "d");
}

TEST(ReadCsv, MissingColumnIsDataError) {
  std::istringstream in("image_id,age\na,1\n");
  ReadReport report;
  EXPECT_THROW(read_csv(in, [](ImpressionRecord&&) {}, report), DataError);
}

TEST(Instances, JsonlRoundTripIsExact) {
  const auto out = aggregate(oracle::random_log(4000, 25, 11), 1);
  std::stringstream io;
  write_instances(io, out);
  EXPECT_EQ(read_instances(io), out);
}

TEST(Instances, InconsistentCtrRejectedWithLine) {
  std::istringstream in(
      R"({"image_id":"a","attributes":{},"y":0.5,"w":4,"clicks":2})"
      "\n"
      R"({"image_id":"b","attributes":{},"y":0.3,"w":4,"clicks":2})"
      "\n");
  try {
    read_instances(in);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

// ---------------------------------------------------------------- merging

AggregatedInstance inst(const std::string& id, const std::string& level, std::uint64_t w,
                        std::uint64_t clicks) {
  return AggregatedInstance{id, {{"lvl", level}}, static_cast<double>(clicks) / w, w, clicks};
}

TEST(MergeRareLevels, AllAboveThresholdUnchanged) {
  const std::vector<AggregatedInstance> in{inst("a", "x", 60000, 10), inst("b", "y", 70000, 20)};
  const auto r = merge_rare_levels(in, "lvl", false);
  EXPECT_EQ(r.instances, in);
  EXPECT_TRUE(r.merges.empty());
}

TEST(MergeRareLevels, OrdinalRareAbsorbedIntoOnlyNeighbor) {
  const std::vector<std::string> order{"young", "old"};
  const std::vector<AggregatedInstance> in{inst("a", "young", 100, 10), inst("a", "old", 60000, 10)};
  const auto r = merge_rare_levels(in, "lvl", true, order);
  ASSERT_EQ(r.instances.size(), 1u);
  EXPECT_EQ(r.instances[0].attributes.at("lvl"), "old");
  EXPECT_EQ(r.instances[0].w, 60100u);
  EXPECT_EQ(r.instances[0].clicks, 20u);
  EXPECT_EQ(r.mapping.at("young"), "old");
}

TEST(MergeRareLevels, OrdinalPicksLargerAdjacent) {
  const std::vector<std::string> order{"1", "2", "3", "4"};
  const std::vector<AggregatedInstance> in{inst("a", "1", 90000, 1), inst("a", "2", 80000, 1),
                                           inst("a", "3", 10, 1), inst("a", "4", 70000, 1)};
  const auto r = merge_rare_levels(in, "lvl", true, order);
  EXPECT_EQ(r.mapping.at("3"), "2");
}

TEST(MergeRareLevels, NominalMatchesNearestCtrScan) {
  SplitMix rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<AggregatedInstance> in;
    std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> totals;
    for (int level = 0; level < 5; ++level) {
      const std::uint64_t w = level == 2 ? 1000 + rng.below(1000) : 60000 + rng.below(50000);
      const std::uint64_t clicks = rng.below(w / 2);
      in.push_back(inst("img" + std::to_string(level % 2), "L" + std::to_string(level), w, clicks));
      totals["L" + std::to_string(level)] = {w, clicks};
    }
    const auto ctr = [&](const std::string& l) {
      return static_cast<double>(totals[l].second) / static_cast<double>(totals[l].first);
    };
    std::string want;
    double best = 1e9;
    for (const auto& [l, t] : totals) {
      if (l == "L2") continue;
      const double d = std::abs(ctr(l) - ctr("L2"));
      if (d < best) {
        best = d;
        want = l;
      }
    }
    const auto r = merge_rare_levels(in, "lvl", false);
    ASSERT_EQ(r.merges.size(), 1u);
    EXPECT_EQ(r.merges[0].from, "L2");
    EXPECT_EQ(r.merges[0].to, want);
  }
}

TEST(MergeRareLevels, TerminatesWithNoRareLevelLeft) {
  SplitMix rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<AggregatedInstance> in;
    const std::size_t levels = 2 + rng.below(8);
    for (std::size_t i = 0; i < 40; ++i) {
      const std::uint64_t w = 1 + rng.below(30000);
      const auto candidate = inst("img" + std::to_string(i % 6),
                                  "L" + std::to_string(rng.below(levels)), w, rng.below(w + 1));
      if (std::none_of(in.begin(), in.end(),
                       [&](const auto& x) { return x.key() == candidate.key(); })) {
        in.push_back(candidate);
      }
    }
    const bool ordinal = trial % 2 == 0;
    const auto r = merge_rare_levels(in, "lvl", ordinal, {}, 50000);
    const auto bars = ctr_bars(r.instances, "lvl");
    if (bars.size() > 1) {
      for (const auto& b : bars) EXPECT_GE(b.impressions, 50000u);
    }
    std::uint64_t before = 0, after = 0;
    for (const auto& i : in) before += i.w;
    for (const auto& i : r.instances) after += i.w;
    EXPECT_EQ(before, after);
    std::set<std::string> keys;
    for (const auto& i : r.instances) EXPECT_TRUE(keys.insert(i.key()).second);
  }
}

TEST(MergeRareLevels, SingleLevelIsNoOp) {
  const std::vector<AggregatedInstance> in{inst("a", "x", 5, 1)};
  EXPECT_EQ(merge_rare_levels(in, "lvl", false).instances, in);
}

// ---------------------------------------------------------------- ctr bars

TEST(CtrBars, SingleLevelEqualsGlobalCtr) {
  const auto out = aggregate(repeated(100, 20), 1);
  const auto bars = ctr_bars(out, "age");
  ASSERT_EQ(bars.size(), 1u);
  EXPECT_EQ(bars[0].ctr, 0.2);
}

TEST(CtrBars, CountsSumToRecordTotalInDeclaredOrder) {
  const auto log = oracle::random_log(5000, 50, 4);
  const auto bars = ctr_bars(aggregate(log, 1), "slot", std::vector<std::string>{"top", "bottom"});
  ASSERT_EQ(bars.size(), 2u);
  EXPECT_EQ(bars[0].level, "top");
  EXPECT_EQ(bars[0].impressions + bars[1].impressions, log.size());
}

// ---------------------------------------------------------------- aux

TEST(EncodeAux, OneHotBlock) {
  AuxSchema s{{AttributeSpec::categorical("c", {"a", "b", "c"})}};
  EXPECT_EQ(encode_aux({{"c", "b"}}, s, nullptr), (std::vector<double>{0, 1, 0}));
}

TEST(EncodeAux, RealAdDefaultDims) {
  const AuxSchema s = AuxSchema::real_ad_default();
  EXPECT_EQ(s.dim_aux(), 2383u);
  std::size_t text = 0;
  for (const auto& a : s.attributes) {
    if (a.kind == AttributeSpec::Kind::kEmbedding) text += a.dim;
  }
  EXPECT_EQ(text, 2304u);
  std::size_t categorical = 0;
  for (const auto& a : s.attributes) categorical += a.kind == AttributeSpec::Kind::kCategorical;
  EXPECT_EQ(categorical, 9u);
}

TEST(EncodeAux, PositionalOracle) {
  const AuxSchema s{{AttributeSpec::categorical("g", {"m", "f"}), AttributeSpec::embedding("t", 4),
                     AttributeSpec::categorical("age", {"0", "1", "2", "3"}, true),
                     AttributeSpec::embedding("d", 4)}};
  SplitMix rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> tv(4), dv(4);
    for (double& x : tv) x = rng.uniform(0.1, 1.0);
    for (double& x : dv) x = rng.uniform(0.1, 1.0);
    EmbeddingStore store(4);
    store.put("title", tv);
    store.put("desc", dv);
    const std::string g = rng.below(2) ? "m" : "f";
    const std::size_t age = rng.below(4);
    const auto v =
        encode_aux({{"g", g}, {"t", "title"}, {"age", std::to_string(age)}, {"d", "desc"}}, s, &store);
    ASSERT_EQ(v.size(), s.dim_aux());
    // Layout: g[0,2) age[2,6) t[6,10) d[10,14).
    std::vector<double> want(14, 0.0);
    want[g == "m" ? 0 : 1] = 1.0;
    want[2 + age] = 1.0;
    for (int i = 0; i < 4; ++i) {
      want[6 + i] = tv[i];
      want[10 + i] = dv[i];
    }
    EXPECT_EQ(v, want);
    const auto nonzero = std::count_if(v.begin(), v.end(), [](double x) { return x != 0.0; });
    EXPECT_EQ(nonzero, 2 + 8);
  }
}

TEST(EncodeAux, CategoricalBlocksSumToOne) {
  const AuxSchema s = AuxSchema::real_ad_default();
  AuxSchema cats;
  for (const auto& a : s.attributes) {
    if (a.kind == AttributeSpec::Kind::kCategorical) cats.attributes.push_back(a);
  }
  SplitMix rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    AttributeMap m;
    for (const auto& a : cats.attributes) m[a.name] = a.levels[rng.below(a.levels.size())];
    const auto v = encode_aux(m, cats, nullptr);
    ASSERT_EQ(v.size(), 79u);
    const auto offsets = cats.offsets();
    for (const auto& a : cats.attributes) {
      const auto begin = v.begin() + static_cast<std::ptrdiff_t>(offsets.at(a.name));
      EXPECT_EQ(std::accumulate(begin, begin + static_cast<std::ptrdiff_t>(a.width()), 0.0), 1.0);
    }
  }
}

TEST(EncodeAux, Errors) {
  AuxSchema s{{AttributeSpec::categorical("c", {"a", "b"}), AttributeSpec::embedding("t", 2)}};
  EmbeddingStore store(2);
  store.put("known", {1.0, 2.0});
  EXPECT_THROW(encode_aux({{"c", "z"}, {"t", "known"}}, s, &store), SchemaError);
  EXPECT_THROW(encode_aux({{"t", "known"}}, s, &store), SchemaError);
  EXPECT_THROW(encode_aux({{"c", "a"}, {"t", "unknown"}}, s, &store), StoreError);
  EXPECT_THROW(store.put("bad", {1.0}), ShapeError);
}

TEST(EncodeAux, SchemaJsonRoundTrip) {
  const AuxSchema s = AuxSchema::real_ad_default();
  nlohmann::json j = s;
  const AuxSchema back = j.get<AuxSchema>();
  EXPECT_EQ(back.dim_aux(), s.dim_aux());
  EXPECT_EQ(back.names(), s.names());
  EXPECT_TRUE(back.find("age")->ordinal);
}

TEST(EmbeddingStore, SaveLoadAndCorruption) {
  const auto dir = scratch("store");
  EmbeddingStore store(3);
  store.put("alpha", {0.1, -2.0, 3.5});
  store.put("beta", {1e-300, 7.0, -0.0});
  store.save(dir);
  const EmbeddingStore back = EmbeddingStore::load(dir);
  EXPECT_EQ(back.dim(), 3u);
  EXPECT_EQ(back.size(), 2u);
  EXPECT_TRUE(std::equal(back.get("beta").begin(), back.get("beta").end(),
                         store.get("beta").begin()));
  {
    std::fstream f(dir / "vectors.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(5);
    f.put('\x7f');
  }
  EXPECT_THROW(EmbeddingStore::load(dir), StoreError);
  std::filesystem::resize_file(dir / "vectors.bin", 8);
  EXPECT_THROW(EmbeddingStore::load(dir), StoreError);
  std::filesystem::remove(dir / "index.json");
  EXPECT_THROW(EmbeddingStore::load(dir), StoreError);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------- images

Image two_halves(const Rgb& a, const Rgb& b, std::size_t rows_a, std::size_t size = 10) {
  Image img = Image::filled(size, size, b);
  for (std::size_t y = 0; y < rows_a; ++y)
    for (std::size_t x = 0; x < size; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = a[c];
  return img;
}

TEST(DominantColor, SolidPaletteEntry) {
  const Image img = Image::filled(8, 8, default_palette()[3].rgb);
  const auto r = dominant_color(img);
  EXPECT_EQ(r.palette_index, 3u);
  EXPECT_TRUE(r.euclidean_fallback);
  EXPECT_FALSE(r.warnings.empty());
}

TEST(DominantColor, MajorityHalf) {
  const Rgb blueish{0.1, 0.15, 0.9}, reddish{0.95, 0.1, 0.05};
  EXPECT_EQ(dominant_color(two_halves(blueish, reddish, 7)).palette_index, 7u);
  EXPECT_EQ(dominant_color(two_halves(blueish, reddish, 3)).palette_index, 2u);
}

Image noisy_three_color(std::uint64_t seed, std::size_t size = 24) {
  SplitMix rng(seed);
  const Rgb colors[3] = {{0.9, 0.2, 0.1}, {0.1, 0.7, 0.3}, {0.2, 0.2, 0.8}};
  Image img = Image::filled(size, size, {0, 0, 0});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = rng.uniform();
      const Rgb& c = colors[u < 0.5 ? 0 : (u < 0.8 ? 1 : 2)];
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(ch, y, x) = c[ch] + rng.uniform(-0.05, 0.05);
    }
  return img;
}

// Lloyd iterations in RGB space with d(x, c) = (x - c)^T S^-1 (x - c), S^-1
// from the adjugate.
struct LloydOracle {
  std::vector<Rgb> centers;
  std::vector<std::size_t> counts;
};

LloydOracle lloyd_oracle(const std::vector<Rgb>& px, std::vector<Rgb> centers,
                         const std::array<double, 9>& s, bool euclidean, std::size_t max_iter,
                         double tol) {
  std::array<double, 9> inv{1, 0, 0, 0, 1, 0, 0, 0, 1};
  if (!euclidean) {
    const double det = s[0] * (s[4] * s[8] - s[5] * s[7]) - s[1] * (s[3] * s[8] - s[5] * s[6]) +
                       s[2] * (s[3] * s[7] - s[4] * s[6]);
    inv = {(s[4] * s[8] - s[5] * s[7]) / det, (s[2] * s[7] - s[1] * s[8]) / det,
           (s[1] * s[5] - s[2] * s[4]) / det, (s[5] * s[6] - s[3] * s[8]) / det,
           (s[0] * s[8] - s[2] * s[6]) / det, (s[2] * s[3] - s[0] * s[5]) / det,
           (s[3] * s[7] - s[4] * s[6]) / det, (s[1] * s[6] - s[0] * s[7]) / det,
           (s[0] * s[4] - s[1] * s[3]) / det};
  }
  const auto dist = [&](const Rgb& x, const Rgb& c) {
    double d = 0.0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) d += (x[i] - c[i]) * inv[i * 3 + j] * (x[j] - c[j]);
    return d;
  };
  std::vector<std::size_t> counts(centers.size());
  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    std::vector<Rgb> sums(centers.size(), Rgb{0, 0, 0});
    std::fill(counts.begin(), counts.end(), 0);
    for (const Rgb& x : px) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < centers.size(); ++c)
        if (dist(x, centers[c]) < dist(x, centers[best])) best = c;
      for (int i = 0; i < 3; ++i) sums[best][i] += x[i];
      ++counts[best];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      if (counts[c] == 0) continue;
      Rgb next;
      for (int i = 0; i < 3; ++i) next[i] = sums[c][i] / static_cast<double>(counts[c]);
      shift = std::max(shift, std::sqrt(dist(next, centers[c])));
      centers[c] = next;
    }
    if (shift < tol) break;
  }
  return {centers, counts};
}

TEST(DominantColor, ClusteringMatchesLloydOracle) {
  for (std::uint64_t seed : {1u, 2u, 3u, 4u}) {
    const Image img = noisy_three_color(seed);
    DominantColorOptions o;
    o.seed = seed;
    const auto r = dominant_color(img, o);
    ASSERT_FALSE(r.euclidean_fallback);
    const auto want = lloyd_oracle(image_pixels(img), r.initial_centers, r.robust.cov, false,
                                   o.max_iter, o.tol);
    EXPECT_EQ(r.counts, want.counts) << seed;
    for (std::size_t c = 0; c < want.centers.size(); ++c)
      for (int i = 0; i < 3; ++i) EXPECT_NEAR(r.centers[c][i], want.centers[c][i], 1e-9);
    const std::size_t largest =
        std::max_element(want.counts.begin(), want.counts.end()) - want.counts.begin();
    EXPECT_EQ(r.palette_index, nearest_palette_index(want.centers[largest], default_palette()));
  }
}

TEST(DominantColor, McdIgnoresOutliers) {
  // 85% tight cluster, 15% far outliers: the robust covariance reflects the
  // cluster only.
  SplitMix rng(12);
  std::vector<Rgb> px;
  for (int i = 0; i < 170; ++i)
    px.push_back({0.5 + rng.uniform(-0.01, 0.01), 0.5 + rng.uniform(-0.01, 0.01),
                  0.5 + rng.uniform(-0.01, 0.01)});
  for (int i = 0; i < 30; ++i) px.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
  const auto r = mcd_covariance(px, 0.75, 20, 1);
  ASSERT_FALSE(r.degenerate);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(r.mean[i], 0.5, 0.005);
    EXPECT_LT(r.cov[i * 4], 1e-4);
  }
}

TEST(DominantColor, DeterministicGivenSeed) {
  const Image img = noisy_three_color(9);
  DominantColorOptions o;
  o.seed = 77;
  const auto a = dominant_color(img, o), b = dominant_color(img, o);
  EXPECT_EQ(a.palette_index, b.palette_index);
  EXPECT_EQ(a.centers, b.centers);
  EXPECT_EQ(a.robust.cov, b.robust.cov);
}

TEST(DominantColor, KZeroRejected) {
  DominantColorOptions o;
  o.k = 0;
  EXPECT_THROW(dominant_color(Image::filled(2, 2, {0, 0, 0}), o), ContractError);
}

TEST(Images, PpmRoundTripAndResize) {
  const auto dir = scratch("ppm");
  const Image img = noisy_three_color(2, 6);
  write_ppm(dir / "a.ppm", img);
  const Image back = read_ppm(dir / "a.ppm");
  ASSERT_EQ(back.height, 6u);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    EXPECT_NEAR(back.data[i], std::clamp(img.data[i], 0.0, 1.0), 0.5 / 255 + 1e-12);
  }
  { std::ofstream(dir / "bad.ppm") << "P3\n1 1\n255\n0 0 0\n"; }
  EXPECT_THROW(read_ppm(dir / "bad.ppm"), DataError);
  const Image solid = Image::filled(5, 7, {0.2, 0.4, 0.6});
  const Image small = resize(solid, 3, 3);
  for (std::size_t i = 0; i < small.data.size(); ++i)
    EXPECT_NEAR(small.data[i], 0.2 * (1 + static_cast<double>(i / 9)), 1e-12);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------- buckets

// Mass of a log-normal(mu, sigma) over [a, b], by Simpson's rule in log space.
double lognormal_mass(double mu, double sigma, double a, double b) {
  const int n = 4000;
  const double lo = std::log(a), hi = std::log(b), h = (hi - lo) / n;
  const auto pdf = [&](double t) {
    const double z = (t - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2 * M_PI));
  };
  double s = pdf(lo) + pdf(hi);
  for (int i = 1; i < n; ++i) s += pdf(lo + i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

TEST(Buckets, DefaultGrid) {
  const BucketGrid g = BucketGrid::ctr_default();
  ASSERT_EQ(g.size(), 10u);
  EXPECT_EQ(g.edges.front(), 1e-6);
  EXPECT_EQ(g.edges.back(), 1.0);
  for (std::size_t k = 0; k < 10; ++k) {
    EXPECT_NEAR(g.edges[k + 1] / g.edges[k], std::pow(10.0, 0.6), 1e-12);
    EXPECT_EQ(g.bucket_of(g.values[k]), k);
  }
}

TEST(Buckets, SumToOne) {
  SplitMix rng(2);
  for (int i = 0; i < 500; ++i) {
    const double y = i % 10 == 0 ? 0.0 : rng.uniform();
    const auto d = ctr_to_distribution(y, 1 + rng.below(100000));
    EXPECT_NEAR(std::accumulate(d.probs.begin(), d.probs.end(), 0.0), 1.0, 1e-9);
    EXPECT_NO_THROW(d.validate());
  }
}

TEST(Buckets, MatchesNumericIntegration) {
  const BucketGrid g = BucketGrid::ctr_default();
  for (const auto& [y, w] : std::vector<std::pair<double, std::uint64_t>>{
           {0.2, 1}, {0.03, 10}, {0.5, 100}, {1e-5, 3}, {0.9, 1000}}) {
    const auto d = ctr_to_distribution(y, w, g);
    const double mu = std::log(std::clamp(y, 1e-6, 1.0)), sigma = 1.0 / std::sqrt(double(w));
    std::vector<double> m(10);
    double total = 0.0;
    for (std::size_t k = 0; k < 10; ++k) total += m[k] = lognormal_mass(mu, sigma, g.edges[k], g.edges[k + 1]);
    for (std::size_t k = 0; k < 10; ++k) EXPECT_NEAR(d.probs[k], m[k] / total, 1e-8) << y << " " << k;
  }
}

TEST(Buckets, LargeWeightConcentrates) {
  const BucketGrid g = BucketGrid::ctr_default();
  for (const double y : {0.002, 0.05, 0.2, 0.7}) {
    const auto d = ctr_to_distribution(y, 1000000, g);
    EXPECT_GT(d.probs[g.bucket_of(y)], 0.9) << y;
  }
}

TEST(Buckets, StdShrinksWithWeight) {
  for (const double y : {0.01, 0.2, 0.5}) {
    double last = std::numeric_limits<double>::infinity();
    for (const std::uint64_t w : {1u, 4u, 16u, 64u, 256u}) {
      const double s = dist_moments(ctr_to_distribution(y, w)).std;
      EXPECT_LT(s, last) << y << " " << w;
      last = s;
    }
  }
}

TEST(Buckets, ZeroCtrClampsAndBadInputs) {
  const auto d = ctr_to_distribution(0.0, 1000);
  EXPECT_EQ(d.probs, ctr_to_distribution(1e-6, 1000).probs);
  EXPECT_THROW(ctr_to_distribution(0.2, 0), ContractError);
  EXPECT_THROW(ctr_to_distribution(1.5, 10), ContractError);
}

// The bucket values are fixed geometric centers a factor of ~4 apart, so the
// mean of a concentrated distribution is the center of y's bucket, not y.
// Kept disabled; see the bucketization notes in the README.
TEST(Buckets, DISABLED_MeanWithinTenPercentOfCtr) {
  SplitMix rng(4);
  for (int i = 0; i < 200; ++i) {
    const double y = rng.uniform(0.01, 0.99);
    const std::uint64_t w = 100 + rng.below(100000);
    const double mean = dist_moments(ctr_to_distribution(y, w)).mean;
    EXPECT_LE(std::abs(mean - y), 0.1 * y) << y << " " << w;
  }
}

// ---------------------------------------------------------------- dataset

TEST(BuildDataset, ShapesTargetsAndSplit) {
  const AuxSchema schema{{AttributeSpec::categorical("age", {"0", "1", "2"}, true),
                          AttributeSpec::categorical("slot", {"top", "bottom"}),
                          AttributeSpec::categorical("k", [] {
                            std::vector<std::string> l;
                            for (int i = 0; i < 60; ++i) l.push_back(std::to_string(i));
                            return l;
                          }())}};
  const auto instances = aggregate(oracle::random_log(4000, 50, 6), 1);
  ImageSet images;
  for (int i = 0; i < 17; ++i) images["img" + std::to_string(i)] = noisy_three_color(i, 12);
  BuildOptions o;
  o.image_size = 8;
  o.normalize_weights = true;
  const Dataset d = build_dataset(instances, schema, nullptr, images, o);
  EXPECT_EQ(d.size(), instances.size());
  EXPECT_EQ(d.dim_aux, 65u);
  EXPECT_EQ(d.images.front().size(), 3u * 8 * 8);
  double mean_w = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.samples[i].y, instances[i].y);
    EXPECT_EQ(d.image_ids[d.samples[i].image], instances[i].image_id);
    EXPECT_EQ(d.samples[i].target_dist.size(), 10u);
    mean_w += d.samples[i].w;
  }
  EXPECT_NEAR(mean_w / d.size(), 1.0, 1e-12);

  const auto [train, test] = split_by_image(d, 0.3, 5);
  EXPECT_EQ(train.size() + test.size(), d.size());
  EXPECT_GT(test.size(), 0u);
  std::set<std::size_t> train_images;
  for (const auto& s : train.samples) train_images.insert(s.image);
  for (const auto& s : test.samples) EXPECT_FALSE(train_images.contains(s.image));

  images.erase("img3");
  EXPECT_THROW(build_dataset(instances, schema, nullptr, images, o), DataError);
}

TEST(BuildDataset, AnnotatesDominantColors) {
  std::vector<AggregatedInstance> instances{inst("r", "x", 10, 1), inst("b", "x", 10, 2),
                                            inst("r", "y", 10, 3)};
  ImageSet images{{"r", Image::filled(6, 6, {0.95, 0.05, 0.0})},
                  {"b", noisy_three_color(3, 10)}};
  const auto warnings = annotate_dominant_colors(instances, images, {}, "dominant_color", 2);
  EXPECT_EQ(instances[0].attributes.at("dominant_color"), "red");
  EXPECT_EQ(instances[2].attributes.at("dominant_color"), "red");
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_EQ(warnings[0].rfind("r: ", 0), 0u);
}

}  // namespace
}  // namespace m2fn
