#include "m2fn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

#include "m2fn/errors.hpp"
#include "m2fn/objectives.hpp"
#include "m2fn/random.hpp"

namespace m2fn::synth {

using nlohmann::json;

namespace {

std::vector<std::string> numbered(const std::string& prefix, int count) {
  std::vector<std::string> out;
  for (int i = 1; i <= count; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

}  // namespace

std::vector<AttributeEffect> GenConfig::default_attributes() {
  return {
      {"gender", {"male", "female"}, {0.0, 0.0}, false},
      {"age", {"18-24", "25-34", "35-44", "45-54", "55+"}, {-0.03, -0.015, 0.0, 0.015, 0.03}, true},
      {"month", numbered("m", 12), std::vector<double>(12, 0.0), true},
      {"weekday", {"mon", "tue", "wed", "thu", "fri", "sat", "sun"}, std::vector<double>(7, 0.0), true},
      {"time", {"morning", "afternoon", "evening", "night"}, {0.02, 0.01, 0.0, -0.02}, true},
      {"position", {"top", "bottom"}, {0.01, -0.01}, false},
      {"category2", {"games", "finance", "shopping"}, {-0.02, 0.0, 0.02}, false},
  };
}

std::array<double, 10> GenConfig::default_color_effects() {
  // black white red orange yellow green cyan blue purple gray
  return {0.0, 0.0, 0.02, 0.01, 0.015, -0.01, 0.0, -0.015, 0.005, -0.02};
}

GenConfig GenConfig::null_model() {
  GenConfig c;
  for (AttributeEffect& a : c.attributes) std::fill(a.effects.begin(), a.effects.end(), 0.0);
  c.color_effects.fill(0.0);
  c.text_saliency = 0.0;
  c.title_scale = 0.0;
  return c;
}

void GenConfig::validate() const {
  if (n_images == 0 || campaigns_per_image == 0) throw ConfigError("synth: need images and campaigns");
  if (image_size < 8) throw ConfigError("synth: image_size must be at least 8");
  if (title_dim == 0 || n_titles == 0) throw ConfigError("synth: title_dim and n_titles must be positive");
  if (!(text_probability >= 0.0 && text_probability <= 1.0)) {
    throw ConfigError("synth: text_probability must be in [0,1]");
  }
  if (!(pixel_noise >= 0.0 && pixel_noise <= 0.5)) throw ConfigError("synth: pixel_noise must be in [0,0.5]");
  // Extreme CTRs over every effect source.
  std::vector<std::pair<double, double>> ranges;
  bool has_position = false;
  std::set<std::string> names;
  for (const AttributeEffect& a : attributes) {
    if (a.levels.empty() || a.levels.size() != a.effects.size()) {
      throw ConfigError("synth: attribute " + a.name + " needs one effect per level");
    }
    if (!names.insert(a.name).second || a.name == "title" || a.name == "dominant_color") {
      throw ConfigError("synth: attribute name " + a.name + " is duplicated or reserved");
    }
    if (a.name == "position") {
      has_position = a.levels == std::vector<std::string>{"top", "bottom"};
    }
    ranges.emplace_back(*std::min_element(a.effects.begin(), a.effects.end()),
                        *std::max_element(a.effects.begin(), a.effects.end()));
  }
  if (!has_position) throw ConfigError("synth: need a 'position' attribute with levels top, bottom");
  ranges.emplace_back(*std::min_element(color_effects.begin(), color_effects.end()),
                      *std::max_element(color_effects.begin(), color_effects.end()));
  ranges.emplace_back(-std::abs(title_scale), std::abs(title_scale));
  if (text_probability > 0.0) ranges.emplace_back(-std::abs(text_saliency), std::abs(text_saliency));
  double lo = base_ctr, hi = base_ctr;
  for (const auto& [min, max] : ranges) {
    if (combine == Combine::kAdditive) {
      lo += min;
      hi += max;
    } else {
      lo *= std::max(1.0 + min, 0.0);
      hi *= 1.0 + max;
    }
  }
  if (!(lo > 0.0 && hi < 1.0)) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "synth: planted CTR range [%.4f, %.4f] leaves (0, 1)", lo, hi);
    throw ConfigError(buf);
  }
}

void to_json(json& j, const GenConfig& c) {
  json attrs = json::array();
  for (const AttributeEffect& a : c.attributes) {
    attrs.push_back({{"name", a.name}, {"levels", a.levels}, {"effects", a.effects}, {"ordinal", a.ordinal}});
  }
  j = json{{"n_images", c.n_images},
           {"campaigns_per_image", c.campaigns_per_image},
           {"n_records", c.n_records},
           {"seed", c.seed},
           {"image_size", c.image_size},
           {"base_ctr", c.base_ctr},
           {"combine", c.combine == Combine::kAdditive ? "additive" : "multiplicative"},
           {"attributes", attrs},
           {"color_effects", c.color_effects},
           {"text_saliency", c.text_saliency},
           {"text_probability", c.text_probability},
           {"n_titles", c.n_titles},
           {"title_dim", c.title_dim},
           {"title_scale", c.title_scale},
           {"pixel_noise", c.pixel_noise}};
}

void from_json(const json& j, GenConfig& c) {
  GenConfig d;
  c.n_images = j.value("n_images", d.n_images);
  c.campaigns_per_image = j.value("campaigns_per_image", d.campaigns_per_image);
  c.n_records = j.value("n_records", d.n_records);
  c.seed = j.value("seed", d.seed);
  c.image_size = j.value("image_size", d.image_size);
  c.base_ctr = j.value("base_ctr", d.base_ctr);
  const std::string combine = j.value("combine", std::string("additive"));
  if (combine != "additive" && combine != "multiplicative") {
    throw ConfigError("synth: combine must be additive or multiplicative");
  }
  c.combine = combine == "additive" ? Combine::kAdditive : Combine::kMultiplicative;
  if (j.contains("attributes")) {
    c.attributes.clear();
    for (const json& a : j.at("attributes")) {
      c.attributes.push_back({a.at("name").get<std::string>(),
                              a.at("levels").get<std::vector<std::string>>(),
                              a.at("effects").get<std::vector<double>>(), a.value("ordinal", false)});
    }
  } else {
    c.attributes = d.attributes;
  }
  c.color_effects = j.value("color_effects", d.color_effects);
  c.text_saliency = j.value("text_saliency", d.text_saliency);
  c.text_probability = j.value("text_probability", d.text_probability);
  c.n_titles = j.value("n_titles", d.n_titles);
  c.title_dim = j.value("title_dim", d.title_dim);
  c.title_scale = j.value("title_scale", d.title_scale);
  c.pixel_noise = j.value("pixel_noise", d.pixel_noise);
}

std::vector<std::uint8_t> GroundTruth::mask(std::size_t i) const {
  const std::size_t s = config.image_size;
  std::vector<std::uint8_t> m(s * s, 0);
  const TextBlock& t = images.at(i).text;
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) m[y * s + x] = t.contains(y, x) ? 1 : 0;
  return m;
}

std::size_t GroundTruth::campaign_of(std::uint64_t r) const {
  const auto it = std::upper_bound(campaigns.begin(), campaigns.end(), r,
                                   [](std::uint64_t v, const Campaign& c) { return v < c.first_record; });
  if (it == campaigns.begin()) throw ContractError("synth: record index out of range");
  const auto index = static_cast<std::size_t>(it - campaigns.begin() - 1);
  if (r >= campaigns[index].first_record + campaigns[index].impressions) {
    throw ContractError("synth: record index out of range");
  }
  return index;
}

void to_json(json& j, const GroundTruth& t) {
  json images = json::array();
  for (const ImageTruth& im : t.images) {
    images.push_back({{"id", im.id},
                      {"background", default_palette()[im.background].name},
                      {"text", {{"present", im.text.present},
                                {"top", im.text.top},
                                {"rows", {im.text.y0, im.text.y1}},
                                {"cols", {im.text.x0, im.text.x1}}}},
                      {"title", im.title},
                      {"title_effect", im.title_effect}});
  }
  json campaigns = json::array();
  for (const Campaign& c : t.campaigns) {
    campaigns.push_back({{"image", c.image},
                         {"attributes", c.attributes},
                         {"ctr", c.ctr},
                         {"first_record", c.first_record},
                         {"impressions", c.impressions}});
  }
  j = json{{"config", t.config}, {"images", images}, {"campaigns", campaigns}};
}

void from_json(const json& j, GroundTruth& t) {
  t.config = j.at("config").get<GenConfig>();
  t.images.clear();
  for (const json& im : j.at("images")) {
    ImageTruth it;
    it.id = im.at("id").get<std::string>();
    const std::string bg = im.at("background").get<std::string>();
    const auto& pal = default_palette();
    const auto pos = std::find_if(pal.begin(), pal.end(), [&](const PaletteEntry& p) { return p.name == bg; });
    if (pos == pal.end()) throw DataError("truth: unknown background " + bg);
    it.background = static_cast<std::size_t>(pos - pal.begin());
    const json& tx = im.at("text");
    it.text.present = tx.at("present").get<bool>();
    it.text.top = tx.at("top").get<bool>();
    it.text.y0 = tx.at("rows")[0].get<std::size_t>();
    it.text.y1 = tx.at("rows")[1].get<std::size_t>();
    it.text.x0 = tx.at("cols")[0].get<std::size_t>();
    it.text.x1 = tx.at("cols")[1].get<std::size_t>();
    it.title = im.at("title").get<std::string>();
    it.title_effect = im.at("title_effect").get<double>();
    t.images.push_back(std::move(it));
  }
  t.campaigns.clear();
  for (const json& c : j.at("campaigns")) {
    t.campaigns.push_back(Campaign{c.at("image").get<std::size_t>(), c.at("attributes").get<AttributeMap>(),
                                   c.at("ctr").get<double>(), c.at("first_record").get<std::uint64_t>(),
                                   c.at("impressions").get<std::uint64_t>()});
  }
}

namespace {

std::string image_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img%05zu", i);
  return buf;
}

// Largest-remainder allocation of `total` across `shares`, ties to the lower
// index.
std::vector<std::uint64_t> allocate(std::uint64_t total, const std::vector<double>& shares) {
  const double sum = std::accumulate(shares.begin(), shares.end(), 0.0);
  std::vector<std::uint64_t> out(shares.size());
  std::vector<std::pair<double, std::size_t>> remainder;
  std::uint64_t used = 0;
  for (std::size_t i = 0; i < shares.size(); ++i) {
    const double exact = static_cast<double>(total) * shares[i] / sum;
    out[i] = static_cast<std::uint64_t>(std::floor(exact));
    used += out[i];
    remainder.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(remainder.begin(), remainder.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[remainder[k % remainder.size()].second];
  return out;
}

}  // namespace

Generated generate(const GenConfig& config) {
  config.validate();
  Generated g{GroundTruth{config, {}, {}}, {}, EmbeddingStore(config.title_dim)};
  const std::size_t s = config.image_size;
  const auto& palette = default_palette();

  std::vector<double> direction(config.title_dim);
  {
    SplitMix rng(derive_seed(config.seed, "title.direction"));
    double norm = 0.0;
    for (double& v : direction) {
      v = rng.normal();
      norm += v * v;
    }
    for (double& v : direction) v /= std::sqrt(norm);
  }

  for (std::size_t i = 0; i < config.n_images; ++i) {
    ImageTruth t;
    t.id = image_id(i);
    SplitMix rng(derive_seed(config.seed, "image." + t.id));
    t.background = 2 + rng.below(8);
    t.text.present = rng.uniform() < config.text_probability;
    t.text.top = rng.uniform() < 0.5;
    if (t.text.present) {
      t.text.y0 = t.text.top ? s / 8 : 5 * s / 8;
      t.text.y1 = t.text.top ? 3 * s / 8 : 7 * s / 8;
      t.text.x0 = 3 * s / 16;
      t.text.x1 = 13 * s / 16;
    }
    Image img = Image::filled(s, s, palette[t.background].rgb);
    for (std::size_t y = 0; y < s; ++y) {
      for (std::size_t x = 0; x < s; ++x) {
        const bool stroke = t.text.contains(y, x);
        for (std::size_t c = 0; c < 3; ++c) {
          const double base = stroke ? (x % 2 == 0 ? 0.0 : 1.0) : img.at(c, y, x);
          img.at(c, y, x) = std::clamp(base + rng.uniform(-config.pixel_noise, config.pixel_noise), 0.0, 1.0);
        }
      }
    }
    char title[32];
    std::snprintf(title, sizeof title, "title-%04llu",
                  static_cast<unsigned long long>(rng.below(config.n_titles)));
    t.title = title;
    std::vector<double> embedding(config.title_dim);
    SplitMix trng(derive_seed(config.seed, t.title));
    double dot = 0.0;
    for (std::size_t k = 0; k < embedding.size(); ++k) dot += (embedding[k] = trng.normal()) * direction[k];
    t.title_effect = config.title_scale * std::tanh(dot);
    if (!g.titles.contains(t.title)) g.titles.put(t.title, std::move(embedding));
    g.images.emplace(t.id, std::move(img));
    g.truth.images.push_back(std::move(t));
  }

  std::vector<double> shares;
  for (std::size_t i = 0; i < config.n_images; ++i) {
    const ImageTruth& im = g.truth.images[i];
    std::set<AttributeMap> seen;
    for (std::size_t k = 0; k < config.campaigns_per_image; ++k) {
      SplitMix rng(derive_seed(config.seed, "campaign." + im.id + "." + std::to_string(k)));
      Campaign c;
      c.image = i;
      std::vector<double> terms;
      do {
        c.attributes.clear();
        terms = {config.color_effects[im.background], im.title_effect};
        for (const AttributeEffect& a : config.attributes) {
          const std::size_t level = rng.below(a.levels.size());
          c.attributes[a.name] = a.levels[level];
          terms.push_back(a.effects[level]);
        }
      } while (!seen.insert(c.attributes).second);
      if (im.text.present) {
        const bool match = (c.attributes.at("position") == "top") == im.text.top;
        terms.push_back(match ? config.text_saliency : -config.text_saliency);
      }
      double ctr = config.base_ctr;
      for (const double e : terms) ctr = config.combine == Combine::kAdditive ? ctr + e : ctr * (1.0 + e);
      c.attributes["title"] = im.title;
      c.ctr = ctr;
      shares.push_back(rng.uniform(0.5, 1.5));
      g.truth.campaigns.push_back(std::move(c));
    }
  }
  const auto impressions = allocate(config.n_records, shares);
  std::uint64_t first = 0;
  for (std::size_t k = 0; k < g.truth.campaigns.size(); ++k) {
    g.truth.campaigns[k].first_record = first;
    g.truth.campaigns[k].impressions = impressions[k];
    first += impressions[k];
  }
  return g;
}

ImpressionRecord make_record(const GroundTruth& truth, std::uint64_t r) {
  const Campaign& c = truth.campaigns[truth.campaign_of(r)];
  const std::uint64_t key = derive_seed(truth.config.seed, "clicks");
  return ImpressionRecord{truth.images[c.image].id, c.attributes, counter_uniform(key, r) < c.ctr};
}

void emit_records(const GroundTruth& truth, std::uint64_t first, std::uint64_t last,
                  const RecordSink& sink) {
  if (last > truth.config.n_records || first > last) throw ContractError("synth: bad record range");
  const std::uint64_t key = derive_seed(truth.config.seed, "clicks");
  std::size_t k = first < last ? truth.campaign_of(first) : 0;
  for (std::uint64_t r = first; r < last; ++r) {
    while (r >= truth.campaigns[k].first_record + truth.campaigns[k].impressions) ++k;
    const Campaign& c = truth.campaigns[k];
    sink(ImpressionRecord{truth.images[c.image].id, c.attributes, counter_uniform(key, r) < c.ctr});
  }
}

AuxSchema schema(const GenConfig& config) {
  AuxSchema s;
  for (const AttributeEffect& a : config.attributes) {
    s.attributes.push_back(AttributeSpec::categorical(a.name, a.levels, a.ordinal));
  }
  std::vector<std::string> colors;
  for (const PaletteEntry& p : default_palette()) colors.push_back(p.name);
  s.attributes.push_back(AttributeSpec::categorical("dominant_color", colors));
  s.attributes.push_back(AttributeSpec::embedding("title", config.title_dim));
  return s;
}

void write(const Generated& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  {
    std::ofstream out(dir / "records.jsonl");
    emit_records(data.truth, 0, data.truth.config.n_records,
                 [&](ImpressionRecord&& r) { out << record_to_jsonl(r) << '\n'; });
    if (!out) throw DataError("synth: cannot write records.jsonl");
  }
  for (const auto& [id, img] : data.images) write_ppm(dir / "images" / (id + ".ppm"), img);
  data.titles.save(dir / "titles");
  std::ofstream(dir / "truth.json") << json(data.truth).dump(1) << '\n';
  std::ofstream(dir / "schema.json") << json(schema(data.truth.config)).dump(1) << '\n';
}

namespace {

std::string campaign_key(const GroundTruth& truth, const std::string& image,
                         const AttributeMap& attributes) {
  AttributeMap subset;
  for (const AttributeEffect& a : truth.config.attributes) {
    const auto it = attributes.find(a.name);
    if (it != attributes.end()) subset.insert(*it);
  }
  if (const auto it = attributes.find("title"); it != attributes.end()) subset.insert(*it);
  return group_key(image, subset);
}

}  // namespace

double true_ctr(const GroundTruth& truth, const AggregatedInstance& instance) {
  for (const Campaign& c : truth.campaigns) {
    if (truth.images[c.image].id != instance.image_id) continue;
    if (campaign_key(truth, instance.image_id, c.attributes) ==
        campaign_key(truth, instance.image_id, instance.attributes)) {
      return c.ctr;
    }
  }
  throw DataError("synth: no campaign for instance " + instance.key());
}

double oracle_eval(const GroundTruth& truth, std::span<const AggregatedInstance> instances) {
  std::map<std::string, double> ctr;
  for (const Campaign& c : truth.campaigns) {
    ctr[campaign_key(truth, truth.images[c.image].id, c.attributes)] = c.ctr;
  }
  std::vector<double> truth_values, empirical;
  for (const AggregatedInstance& inst : instances) {
    const auto it = ctr.find(campaign_key(truth, inst.image_id, inst.attributes));
    if (it == ctr.end()) continue;
    truth_values.push_back(it->second);
    empirical.push_back(inst.y);
  }
  return sprc(truth_values, empirical);
}

}  // namespace m2fn::synth
