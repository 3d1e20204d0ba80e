#include "commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>

#include "m2fn/aux.hpp"
#include "m2fn/errors.hpp"
#include "m2fn/experiment.hpp"
#include "m2fn/grad_suite.hpp"
#include "m2fn/pipeline.hpp"
#include "m2fn/records.hpp"
#include "m2fn/stats.hpp"
#include "m2fn/synth.hpp"

namespace m2fn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

AuxSchema read_schema(const std::string& path) {
  try {
    AuxSchema schema = read_json(path).get<AuxSchema>();
    schema.validate();
    return schema;
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

std::vector<AggregatedInstance> read_instance_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_instances(in);
}

// Loads <id>.ppm for every image id the instances reference.
ImageSet read_images(const std::string& dir, std::span<const AggregatedInstance> instances) {
  std::set<std::string> ids;
  for (const AggregatedInstance& inst : instances) ids.insert(inst.image_id);
  ImageSet images;
  for (const std::string& id : ids) {
    const fs::path path = fs::path(dir) / (id + ".ppm");
    if (!fs::exists(path)) throw DataError("missing image " + path.string());
    images.emplace(id, read_ppm(path));
  }
  return images;
}

std::string text_table(const std::vector<std::string>& header,
                       const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out += cells[c];
      if (c + 1 < cells.size()) out += std::string(width[c] - cells[c].size() + 2, ' ');
    }
    out += '\n';
  };
  line(header);
  for (const auto& row : rows) line(row);
  return out;
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::uint64_t preset_threshold(const std::string& preset) {
  if (preset == "realad-500") return 500;
  return 100;
}

struct LoadedData {
  std::vector<AggregatedInstance> instances;
  AuxSchema schema;
  ImageSet images;
  std::optional<EmbeddingStore> titles;
};

LoadedData load_data(const DataArgs& args) {
  LoadedData d;
  d.instances = read_instance_file(args.instances);
  if (d.instances.empty()) throw DataError(args.instances + ": no instances");
  d.schema = read_schema(args.schema);
  d.images = read_images(args.images, d.instances);
  if (!args.titles.empty()) d.titles = EmbeddingStore::load(args.titles);
  return d;
}

Dataset build(const LoadedData& d, std::size_t image_size, bool normalize_weights) {
  BuildOptions opts;
  opts.image_size = image_size;
  opts.normalize_weights = normalize_weights;
  return build_dataset(d.instances, d.schema, d.titles ? &*d.titles : nullptr, d.images, opts);
}

ModelConfig model_config(const Common& common, const ModelArgs& args, std::size_t dim_aux) {
  ModelConfig mc = SynthExperiment::desk(common.seed).model;
  if (!common.preset.empty()) mc.apply_preset(common.preset);
  if (args.cbn_hidden) mc.cbn_hidden = args.cbn_hidden;
  if (args.attn_hidden) mc.attn_hidden = args.attn_hidden;
  if (args.high_dim) mc.high_dim = args.high_dim;
  mc.backbone = parse_backbone(args.backbone);
  mc.image_size = args.image_size;
  mc.toggles = Toggles::parse(args.toggles);
  mc.head = parse_loss(args.loss) == LossKind::kWeightedMse ? HeadKind::kScalar
                                                             : HeadKind::kDistribution;
  mc.dim_aux = dim_aux;
  mc.seed = common.seed;
  return mc;
}

TrainOptions train_options(const Common& common, const ModelArgs& args) {
  TrainOptions to;
  to.loss = parse_loss(args.loss);
  to.epochs = args.epochs;
  to.batch_size = args.batch;
  to.optimizer.learning_rate = args.lr;
  to.optimizer.momentum = args.momentum;
  to.optimizer.weight_decay = args.weight_decay;
  to.seed = common.seed;
  return to;
}

void write_metrics_summary(std::ostream& out, const MetricReport& m) {
  out << "sprc " << fixed(m.sprc_mean) << "  lcc " << fixed(m.lcc_mean);
  if (m.sprc_std) out << "  sprc(std) " << fixed(*m.sprc_std);
  if (m.lcc_std) out << "  lcc(std) " << fixed(*m.lcc_std);
  out << '\n';
}

}  // namespace

std::vector<ConvStage> parse_backbone(const std::string& spec) {
  std::vector<ConvStage> stages;
  std::size_t start = 0;
  while (start <= spec.size()) {
    std::size_t end = spec.find(',', start);
    if (end == std::string::npos) end = spec.size();
    std::string token = spec.substr(start, end - start);
    ConvStage stage;
    stage.pool = !token.empty() && token.back() == 'p';
    if (stage.pool) token.pop_back();
    if (token.empty() || token.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("backbone: bad stage '" + spec.substr(start, end - start) + "' in '" +
                        spec + "'");
    }
    stage.out_channels = std::stoul(token);
    stages.push_back(stage);
    start = end + 1;
  }
  return stages;
}

json datagen(const Common& common, const DatagenArgs& args) {
  synth::GenConfig config = args.null_model ? synth::GenConfig::null_model() : synth::GenConfig{};
  if (!args.synth_config.empty()) read_json(args.synth_config).get_to(config);
  config.seed = common.seed;
  if (args.images) config.n_images = args.images;
  if (args.records) config.n_records = args.records;
  if (args.campaigns) config.campaigns_per_image = args.campaigns;
  if (args.image_size) config.image_size = args.image_size;
  const synth::Generated data = synth::generate(config);
  synth::write(data, common.out);
  std::cerr << "datagen: " << config.n_images << " images, " << data.truth.campaigns.size()
            << " campaigns, " << config.n_records << " records\n";
  return config;
}

json aggregate(const Common& common, const AggregateArgs& args, std::size_t threads) {
  if (!args.merge_rare.empty() && args.schema.empty()) {
    throw ConfigError("--merge-rare needs --schema for level order");
  }
  Aggregator aggregator;
  json reads = json::array();
  for (const std::string& path : args.inputs) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    const std::string format = args.format != "auto"           ? args.format
                               : fs::path(path).extension() == ".csv" ? "csv"
                                                                      : "jsonl";
    ReadReport report;
    const RecordSink sink = [&](ImpressionRecord&& r) { aggregator.add(r); };
    if (format == "csv") read_csv(in, sink, report);
    else if (format == "jsonl") read_jsonl(in, sink, report);
    else throw ConfigError("unknown format " + format);
    json rejects = json::array();
    for (const auto& [line, msg] : report.rejects) {
      if (rejects.size() == 100) break;
      rejects.push_back({{"line", line}, {"reason", msg}});
      std::cerr << path << ":" << line << ": " << msg << '\n';
    }
    reads.push_back({{"input", fs::path(path).filename().string()},
                     {"lines", report.lines},
                     {"accepted", report.accepted},
                     {"rejected", report.rejects.size()},
                     {"first_rejects", rejects}});
  }
  const std::uint64_t threshold =
      args.min_impressions ? args.min_impressions : preset_threshold(common.preset);
  std::vector<AggregatedInstance> instances = aggregator.finish(threshold);

  json merges = json::array();
  if (!args.merge_rare.empty()) {
    const AuxSchema schema = read_schema(args.schema);
    for (const std::string& name : args.merge_rare) {
      const AttributeSpec* spec = schema.find(name);
      if (!spec) throw SchemaError("--merge-rare: schema has no attribute " + name);
      MergeResult merged =
          merge_rare_levels(instances, name, spec->ordinal, spec->levels, args.rare_threshold);
      for (const LevelMerge& m : merged.merges) {
        merges.push_back(
            {{"attribute", name}, {"from", m.from}, {"to", m.to}, {"impressions", m.impressions}});
      }
      instances = std::move(merged.instances);
    }
  }

  std::vector<std::string> warnings;
  if (!args.images.empty()) {
    DominantColorOptions colors;
    colors.seed = common.seed;
    warnings = annotate_dominant_colors(instances, read_images(args.images, instances), colors,
                                        "dominant_color", threads);
  }
  {
    std::ofstream out = open_out(common.out / "instances.jsonl");
    write_instances(out, instances);
  }
  std::uint64_t covered = 0;
  for (const AggregatedInstance& inst : instances) covered += inst.w;
  const json summary = {{"inputs", reads},
                        {"records", aggregator.records()},
                        {"groups", aggregator.groups()},
                        {"min_impressions", threshold},
                        {"instances", instances.size()},
                        {"impressions_kept", covered},
                        {"merges", merges},
                        {"warnings", warnings}};
  open_out(common.out / "aggregate.json") << summary.dump(2) << '\n';
  std::cerr << "aggregate: " << aggregator.records() << " records, " << aggregator.groups()
            << " groups, " << instances.size() << " instances with >= " << threshold
            << " impressions\n";
  return {{"inputs", args.inputs.size()},
          {"format", args.format},
          {"min_impressions", threshold},
          {"merge_rare", args.merge_rare},
          {"rare_threshold", args.rare_threshold},
          {"dominant_color", !args.images.empty()}};
}

json stats(const Common& common, const StatsArgs& args) {
  const std::vector<AggregatedInstance> instances = read_instance_file(args.instances);
  const AuxSchema schema = read_schema(args.schema);
  const SelectionReport report = select_attributes(instances, schema, args.alpha);
  open_out(common.out / "selection.json") << json(report).dump(2) << '\n';
  open_out(common.out / "selection.txt") << report.text_table();
  // Per-level CTR bars, one JSON line per attribute.
  std::ofstream bars = open_out(common.out / "ctr_bars.jsonl");
  for (const AttributeSpec& spec : schema.attributes) {
    if (spec.kind != AttributeSpec::Kind::kCategorical) continue;
    json levels = json::array();
    for (const CtrBar& bar : ctr_bars(instances, spec.name, spec.levels)) {
      levels.push_back({{"level", bar.level},
                        {"ctr", bar.ctr},
                        {"impressions", bar.impressions},
                        {"clicks", bar.clicks}});
    }
    bars << json{{"attribute", spec.name}, {"levels", levels}}.dump() << '\n';
  }
  std::cout << report.text_table();
  return {{"alpha", args.alpha}};
}

json train(const Common& common, const DataArgs& data, const ModelArgs& args) {
  const LoadedData loaded = load_data(data);
  const Dataset all = build(loaded, args.image_size, !args.raw_weights);
  const auto [train_set, test_set] = split_by_image(all, args.test_fraction, common.seed);
  const ModelConfig mc = model_config(common, args, all.dim_aux);
  const TrainOptions to = train_options(common, args);
  Model model(mc);
  const TrainReport report = m2fn::train(model, train_set, to, test_set.size() ? &test_set : nullptr);
  model.save((common.out / "model.ckpt").string());

  std::ofstream log = open_out(common.out / "train_log.jsonl");
  for (const EpochRecord& r : report.epochs) log << json(r).dump() << '\n';
  json metrics = {{"train", evaluate_model(model, train_set)},
                  {"train_samples", train_set.size()},
                  {"test_samples", test_set.size()},
                  {"initial_loss", report.initial_loss},
                  {"final_loss", report.final_loss}};
  if (report.final_eval) metrics["test"] = *report.final_eval;
  open_out(common.out / "metrics.json") << metrics.dump(2) << '\n';
  std::cout << "train " << mc.toggles.code() << "  loss " << fixed(report.initial_loss, 6)
            << " -> " << fixed(report.final_loss, 6) << '\n';
  if (report.final_eval) {
    std::cout << "test  ";
    write_metrics_summary(std::cout, *report.final_eval);
  }
  return {{"model", mc},
          {"train", to},
          {"test_fraction", args.test_fraction},
          {"normalize_weights", !args.raw_weights}};
}

json eval(const Common& common, const DataArgs& data, const EvalArgs& args) {
  Model model = Model::load(args.model);
  const LoadedData loaded = load_data(data);
  Dataset set = build(loaded, model.config().image_size, true);
  if (args.split != "all") {
    auto [train_set, test_set] = split_by_image(set, args.test_fraction, common.seed);
    if (args.split == "train") set = std::move(train_set);
    else if (args.split == "test") set = std::move(test_set);
    else throw ConfigError("--split must be all, train or test");
  }
  if (set.size() == 0) throw DataError("eval: the selected split is empty");
  const std::vector<Prediction> preds = predict(model, set);
  const MetricReport metrics = evaluate(preds, set.targets(model.config().head));
  std::ofstream out = open_out(common.out / "predictions.jsonl");
  for (std::size_t i = 0; i < preds.size(); ++i) {
    json row = {{"key", set.samples[i].key}, {"y", set.samples[i].y}};
    if (const double* p = std::get_if<double>(&preds[i])) {
      row["prediction"] = *p;
    } else {
      const auto& d = std::get<ScoreDistribution>(preds[i]);
      const Moments m = dist_moments(d);
      row["probs"] = d.probs;
      row["mean"] = m.mean;
      row["std"] = m.std;
    }
    out << row.dump() << '\n';
  }
  open_out(common.out / "metrics.json")
      << json{{"metrics", metrics}, {"samples", set.size()}, {"split", args.split}}.dump(2) << '\n';
  std::cout << "eval " << set.size() << " samples  ";
  write_metrics_summary(std::cout, metrics);
  return {{"model", model.config()}, {"split", args.split}, {"test_fraction", args.test_fraction}};
}

json ablate(const Common& common, const DataArgs& data, const ModelArgs& args,
            const std::vector<std::string>& rows, std::size_t threads) {
  const LoadedData loaded = load_data(data);
  const Dataset all = build(loaded, args.image_size, !args.raw_weights);
  const auto [train_set, test_set] = split_by_image(all, args.test_fraction, common.seed);
  if (test_set.size() == 0) throw DataError("ablate: empty test split");
  const ModelConfig base = model_config(common, args, all.dim_aux);
  const TrainOptions to = train_options(common, args);
  std::vector<Toggles> grid;
  for (const std::string& r : rows) grid.push_back(Toggles::parse(r));
  if (grid.empty()) grid = ablation_rows();

  const std::vector<AblationRow> results = ablate_grid(base, train_set, test_set, to, grid, threads);
  std::ofstream jsonl = open_out(common.out / "ablation.jsonl");
  std::vector<std::vector<std::string>> table;
  auto mark = [](bool on) { return std::string(on ? "O" : "x"); };
  for (const AblationRow& row : results) {
    const Toggles& t = row.toggles;
    jsonl << json{{"toggles", t.code()},
                  {"aux", t.aux},
                  {"low", t.low},
                  {"att", t.att},
                  {"high", t.high},
                  {"metrics", row.metrics},
                  {"initial_loss", row.report.initial_loss},
                  {"final_loss", row.report.final_loss}}
                 .dump()
          << '\n';
    std::vector<std::string> cells = {mark(t.aux), mark(t.low), mark(t.att), mark(t.high),
                                      fixed(row.metrics.sprc_mean), fixed(row.metrics.lcc_mean)};
    if (base.head == HeadKind::kDistribution) {
      cells.push_back(row.metrics.sprc_std ? fixed(*row.metrics.sprc_std) : "-");
      cells.push_back(row.metrics.lcc_std ? fixed(*row.metrics.lcc_std) : "-");
    }
    table.push_back(std::move(cells));
  }
  std::vector<std::string> header = {"Aux", "Low", "Att", "High", "SPRC", "LCC"};
  if (base.head == HeadKind::kDistribution) {
    header.back() = "LCC(mean)";
    header[4] = "SPRC(mean)";
    header.push_back("SPRC(std)");
    header.push_back("LCC(std)");
  }
  const std::string rendered = text_table(header, table);
  open_out(common.out / "ablation.txt") << rendered;
  std::cout << rendered;
  json codes = json::array();
  for (const Toggles& t : grid) codes.push_back(t.code());
  return {{"model", base}, {"train", to}, {"rows", codes}, {"test_fraction", args.test_fraction}};
}

json gradcheck(const Common& common, bool& failed) {
  const std::vector<GradCheckEntry> entries = gradient_suite(common.seed);
  std::ofstream jsonl = open_out(common.out / "gradcheck.jsonl");
  std::vector<std::vector<std::string>> table;
  failed = false;
  for (const GradCheckEntry& e : entries) {
    char err[32];
    std::snprintf(err, sizeof err, "%.3e", e.max_relative_error);
    jsonl << json{{"name", e.name},
                  {"max_relative_error", e.max_relative_error},
                  {"passed", e.passed()}}
                 .dump()
          << '\n';
    table.push_back({e.name, err, e.passed() ? "ok" : "FAIL"});
    failed = failed || !e.passed();
  }
  const std::string rendered = text_table({"check", "max rel err", "status"}, table);
  open_out(common.out / "gradcheck.txt") << rendered;
  std::cout << rendered;
  return {{"tolerance", kGradCheckTolerance}, {"checks", entries.size()}};
}

}  // namespace m2fn::cli
