#include "m2fn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>

#include "m2fn/errors.hpp"

namespace m2fn {

void to_json(nlohmann::json& j, const TrainOptions& o) {
  j = nlohmann::json{{"loss", loss_name(o.loss)},
                     {"epochs", o.epochs},
                     {"batch_size", o.batch_size},
                     {"learning_rate", o.optimizer.learning_rate},
                     {"momentum", o.optimizer.momentum},
                     {"weight_decay", o.optimizer.weight_decay},
                     {"seed", o.seed},
                     {"eval_every", o.eval_every}};
}

void from_json(const nlohmann::json& j, TrainOptions& o) {
  const TrainOptions d;
  o.loss = parse_loss(j.value("loss", loss_name(d.loss)));
  o.epochs = j.value("epochs", d.epochs);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.optimizer.learning_rate = j.value("learning_rate", d.optimizer.learning_rate);
  o.optimizer.momentum = j.value("momentum", d.optimizer.momentum);
  o.optimizer.weight_decay = j.value("weight_decay", d.optimizer.weight_decay);
  o.seed = j.value("seed", d.seed);
  o.eval_every = j.value("eval_every", d.eval_every);
}

SynthExperiment SynthExperiment::desk(std::uint64_t seed) {
  SynthExperiment e;
  e.data.seed = seed;
  e.build.image_size = e.data.image_size;
  e.build.normalize_weights = true;
  e.model.backbone = {{8, 3, 1, true}, {16, 3, 1, true}, {32, 3, 1, false}};
  e.model.cbn_hidden = 32;
  e.model.attn_hidden = 32;
  e.model.high_dim = 64;
  e.model.seed = seed;
  e.train.epochs = 80;
  e.train.batch_size = 32;
  e.train.optimizer.learning_rate = 0.03;
  e.train.optimizer.weight_decay = 1e-3;
  e.train.seed = seed;
  return e;
}

SynthExperiment SynthExperiment::saliency(std::uint64_t seed) {
  SynthExperiment e = desk(seed);
  e.data.image_size = 32;
  e.data.n_images = 250;
  e.data.n_records = 250000;
  e.build.image_size = 32;
  e.train.epochs = 30;
  return e;
}

void to_json(nlohmann::json& j, const SynthExperiment& e) {
  j = nlohmann::json{{"data", e.data},
                     {"min_impressions", e.min_impressions},
                     {"test_fraction", e.test_fraction},
                     {"image_size", e.build.image_size},
                     {"sigma_scale", e.build.sigma_scale},
                     {"normalize_weights", e.build.normalize_weights},
                     {"model", e.model},
                     {"train", e.train}};
}

void from_json(const nlohmann::json& j, SynthExperiment& e) {
  e = SynthExperiment::desk(0);
  j.at("data").get_to(e.data);
  e.min_impressions = j.value("min_impressions", e.min_impressions);
  e.test_fraction = j.value("test_fraction", e.test_fraction);
  e.build.image_size = j.value("image_size", e.build.image_size);
  e.build.sigma_scale = j.value("sigma_scale", e.build.sigma_scale);
  e.build.normalize_weights = j.value("normalize_weights", e.build.normalize_weights);
  j.at("model").get_to(e.model);
  j.at("train").get_to(e.train);
}

PreparedData prepare(const SynthExperiment& experiment, std::size_t threads) {
  PreparedData out;
  out.generated = synth::generate(experiment.data);
  const synth::GroundTruth& truth = out.generated.truth;
  Aggregator aggregator;
  synth::emit_records(truth, 0, experiment.data.n_records,
                      [&](ImpressionRecord&& r) { aggregator.add(r); });
  out.instances = aggregator.finish(experiment.min_impressions);
  if (out.instances.empty()) {
    throw DataError("experiment: no instance reaches " +
                    std::to_string(experiment.min_impressions) + " impressions");
  }
  DominantColorOptions colors;
  colors.seed = experiment.data.seed;
  annotate_dominant_colors(out.instances, out.generated.images, colors, "dominant_color",
                           threads);
  const Dataset all = build_dataset(out.instances, synth::schema(experiment.data),
                                    &out.generated.titles, out.generated.images,
                                    experiment.build);
  std::tie(out.train, out.test) =
      split_by_image(all, experiment.test_fraction, experiment.data.seed);
  out.model = experiment.model;
  out.model.image_size = experiment.build.image_size;
  out.model.dim_aux = all.dim_aux;
  return out;
}

AttentionOverlap attention_overlap(Model& model, const Dataset& data,
                                   const synth::GroundTruth& truth, double top_fraction) {
  if (!model.config().toggles.att) throw ConfigError("attention_overlap: att is off");
  const std::size_t s = data.image_size;
  if (s != truth.config.image_size) {
    throw ConfigError("attention_overlap: data images are " + std::to_string(s) +
                      " px but the generator drew " + std::to_string(truth.config.image_size));
  }
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) {
    throw ConfigError("attention_overlap: top_fraction must lie in (0, 1]");
  }
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < truth.images.size(); ++i) by_id[truth.images[i].id] = i;

  const std::size_t e = model.config().feature_extent();
  const std::size_t cells = e * e;
  const auto top = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(cells))));
  AttentionOverlap out;
  constexpr std::size_t kBatch = 64;
  std::vector<std::size_t> order(cells);
  for (std::size_t first = 0; first < data.size(); first += kBatch) {
    std::vector<std::size_t> batch(std::min(kBatch, data.size() - first));
    std::iota(batch.begin(), batch.end(), first);
    const auto [images, aux] = data.batch(batch);
    model.forward(images, aux, Mode::kEval);
    const auto attn = model.last_attention().values();
    for (std::size_t r = 0; r < batch.size(); ++r) {
      const auto it = by_id.find(data.image_ids[data.samples[batch[r]].image]);
      if (it == by_id.end()) throw DataError("attention_overlap: image not in ground truth");
      if (!truth.images[it->second].text.present) continue;
      const std::vector<std::uint8_t> mask = truth.mask(it->second);
      const double* row = attn.data() + r * cells;
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
      double hit = 0.0, area = 0.0;
      for (std::size_t q = 0; q < top; ++q) {
        const std::size_t ci = order[q] / e, cj = order[q] % e;
        for (std::size_t y = ci * s / e; y < (ci + 1) * s / e; ++y) {
          for (std::size_t x = cj * s / e; x < (cj + 1) * s / e; ++x) {
            hit += mask[y * s + x];
            area += 1.0;
          }
        }
      }
      out.overlap += hit / area;
      out.baseline += std::accumulate(mask.begin(), mask.end(), 0.0) / static_cast<double>(s * s);
      ++out.samples;
    }
  }
  if (out.samples == 0) throw DataError("attention_overlap: no sample carries text");
  out.overlap /= static_cast<double>(out.samples);
  out.baseline /= static_cast<double>(out.samples);
  return out;
}

}  // namespace m2fn
