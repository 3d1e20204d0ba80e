#include <benchmark/benchmark.h>

#include "m2fn/experiment.hpp"
#include "m2fn/image.hpp"
#include "m2fn/ops.hpp"
#include "m2fn/random.hpp"
#include "m2fn/records.hpp"
#include "m2fn/stats.hpp"
#include "m2fn/synth.hpp"

namespace {

using namespace m2fn;

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = false) {
  SplitMix rng(seed);
  std::vector<double> v(element_count(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor(std::move(shape), std::move(v), grad);
}

void BM_Conv2dForward(benchmark::State& state) {
  const std::size_t c = state.range(0);
  const Tensor x = random_tensor({32, c, 16, 16}, 1);
  const Tensor k = random_tensor({2 * c, c, 3, 3}, 2);
  const Tensor b = random_tensor({2 * c}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, b, 1, 1));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_Conv2dForward)->Arg(4)->Arg(8)->Arg(16);

void BM_Conv2dBackward(benchmark::State& state) {
  const Tensor x = random_tensor({32, 8, 16, 16}, 1, true);
  const Tensor k = random_tensor({16, 8, 3, 3}, 2, true);
  const Tensor b = random_tensor({16}, 3, true);
  for (auto _ : state) {
    Tape tape;
    Tensor loss;
    {
      Tape::Recording rec(tape);
      loss = sum(conv2d(x, k, b, 1, 1));
    }
    tape.backward(loss);
  }
}
BENCHMARK(BM_Conv2dBackward);

// One SGD epoch of the desk model over 256 synthetic samples.
void BM_TrainEpoch(benchmark::State& state) {
  const std::string code = state.range(0) ? "OOOO" : "Oxxx";
  SynthExperiment e = SynthExperiment::desk(0);
  e.data.n_images = 64;
  e.data.n_records = 64000;
  e.min_impressions = 1;
  const PreparedData d = prepare(e);
  ModelConfig mc = d.model;
  mc.toggles = Toggles::parse(code);
  TrainOptions to = e.train;
  to.epochs = 1;
  std::vector<std::size_t> idx(std::min<std::size_t>(256, d.train.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const Dataset subset = d.train.subset(idx);
  for (auto _ : state) {
    Model model(mc);
    benchmark::DoNotOptimize(train(model, subset, to));
  }
  state.SetLabel(code);
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(subset.size()));
}
BENCHMARK(BM_TrainEpoch)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_Aggregate(benchmark::State& state) {
  synth::GenConfig c;
  c.n_images = 100;
  c.n_records = state.range(0);
  const synth::Generated g = synth::generate(c);
  std::vector<ImpressionRecord> records;
  synth::emit_records(g.truth, 0, c.n_records,
                      [&](ImpressionRecord&& r) { records.push_back(std::move(r)); });
  for (auto _ : state) benchmark::DoNotOptimize(aggregate(records, 100));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Aggregate)->Arg(100000)->Unit(benchmark::kMillisecond);

void BM_DominantColor(benchmark::State& state) {
  synth::GenConfig c;
  c.n_images = 1;
  c.n_records = 10;
  c.image_size = state.range(0);
  const synth::Generated g = synth::generate(c);
  const Image& image = g.images.begin()->second;
  for (auto _ : state) benchmark::DoNotOptimize(dominant_color(image));
}
BENCHMARK(BM_DominantColor)->Arg(16)->Arg(64)->Unit(benchmark::kMillisecond);

void BM_SelectAttributes(benchmark::State& state) {
  synth::GenConfig c;
  c.n_records = 100000;
  const synth::Generated g = synth::generate(c);
  Aggregator agg;
  synth::emit_records(g.truth, 0, c.n_records, [&](ImpressionRecord&& r) { agg.add(r); });
  const auto instances = agg.finish(1);
  const AuxSchema schema = synth::schema(c);
  for (auto _ : state) benchmark::DoNotOptimize(select_attributes(instances, schema));
}
BENCHMARK(BM_SelectAttributes)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
