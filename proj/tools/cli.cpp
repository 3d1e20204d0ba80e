#include "cli.hpp"

#include <CLI11.hpp>
#include <iostream>
#include <set>

#include "commands.hpp"
#include "m2fn/errors.hpp"
#include "m2fn/manifest.hpp"
#include "m2fn/train.hpp"

#ifndef M2FN_VERSION
#define M2FN_VERSION "unknown"
#endif

namespace m2fn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Options holding input paths; digested into the manifest and stored as
// absolute paths.
const std::set<std::string> kPathOptions = {"input",  "instances", "schema",      "images",
                                            "titles", "model",     "synth-config"};

json versions() {
  return {{"m2fn", M2FN_VERSION},
          {"compiler", __VERSION__},
          {"cplusplus", __cplusplus},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
          {"cli11", CLI11_VERSION}};
}

std::string long_name(const CLI::Option* opt) {
  const auto& names = opt->get_lnames();
  return names.empty() ? opt->get_name() : names.front();
}

// Resolved option values of a subcommand, excluding --out.
std::map<std::string, std::vector<std::string>> resolved_options(const CLI::App* sub) {
  std::map<std::string, std::vector<std::string>> out;
  for (const CLI::Option* opt : sub->get_options()) {
    const std::string name = long_name(opt);
    if (name == "out" || name == "help" || opt->count() == 0) continue;
    std::vector<std::string> values = opt->results();
    if (kPathOptions.contains(name)) {
      for (std::string& v : values) v = fs::absolute(v).lexically_normal().string();
    }
    out[name] = std::move(values);
  }
  return out;
}

void prepare_out(const fs::path& out) {
  if (fs::exists(out) && !fs::is_directory(out)) {
    throw ConfigError("--out " + out.string() + " is not a directory");
  }
  if (fs::exists(out) && !fs::is_empty(out)) {
    throw ConfigError("--out " + out.string() + " is not empty");
  }
  fs::create_directories(out);
}

struct Invocation {
  Common common;
  DatagenArgs datagen;
  AggregateArgs aggregate;
  StatsArgs stats;
  DataArgs data;
  ModelArgs model;
  EvalArgs eval;
  std::vector<std::string> rows;
  std::string manifest;
};

void add_common(CLI::App* sub, Invocation& inv, bool needs_out = true) {
  sub->add_option("--seed", inv.common.seed, "Seed for every random stream")->capture_default_str();
  sub->add_option("--preset", inv.common.preset, "Width and threshold preset")
      ->check(CLI::IsMember({"realad-100", "realad-500", "ava-like"}));
  auto* out = sub->add_option("--out", inv.common.out, "Output directory (created, must be empty)");
  if (needs_out) out->required();
}

void add_data(CLI::App* sub, Invocation& inv) {
  sub->add_option("--instances", inv.data.instances, "Aggregated instances (JSONL)")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--schema", inv.data.schema, "Auxiliary schema (JSON)")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--images", inv.data.images, "Directory of <image_id>.ppm")
      ->required()
      ->check(CLI::ExistingDirectory);
  sub->add_option("--titles", inv.data.titles, "Embedding store for text slots")
      ->check(CLI::ExistingDirectory);
}

void add_model(CLI::App* sub, Invocation& inv) {
  ModelArgs& m = inv.model;
  sub->add_option("--toggles", m.toggles, "Modules, e.g. aux,low,att,high or OOxx")
      ->capture_default_str();
  sub->add_option("--loss", m.loss, "Training loss")
      ->check(CLI::IsMember({"wmse", "kld", "emd"}))
      ->capture_default_str();
  sub->add_option("--epochs", m.epochs)->capture_default_str();
  sub->add_option("--batch", m.batch)->capture_default_str();
  sub->add_option("--lr", m.lr)->capture_default_str();
  sub->add_option("--momentum", m.momentum)->capture_default_str();
  sub->add_option("--weight-decay", m.weight_decay)->capture_default_str();
  sub->add_option("--image-size", m.image_size)->capture_default_str();
  sub->add_option("--backbone", m.backbone, "Stage channels, p = max-pool")->capture_default_str();
  sub->add_option("--cbn-hidden", m.cbn_hidden);
  sub->add_option("--attn-hidden", m.attn_hidden);
  sub->add_option("--high-dim", m.high_dim);
  sub->add_option("--test-fraction", m.test_fraction)->capture_default_str();
  sub->add_flag("--raw-weights", m.raw_weights, "Keep impression counts as loss weights");
}

// Runs the selected command; returns the exit code. Writes the manifest on
// success.
int dispatch(CLI::App& app, Invocation& inv) {
  const std::size_t threads = thread_cap();
  for (CLI::App* sub : app.get_subcommands()) {
    const std::string command = sub->get_name();
    Manifest manifest;
    manifest.version = M2FN_VERSION;
    manifest.command = command;
    manifest.seed = inv.common.seed;
    manifest.versions = versions();
    manifest.options = resolved_options(sub);
    for (const auto& [name, values] : manifest.options) {
      if (!kPathOptions.contains(name)) continue;
      auto& digests = manifest.inputs[name];
      for (const std::string& v : values) {
        for (auto& [rel, d] : tree_digests(v)) {
          digests[values.size() > 1 ? fs::path(v).filename().string() + "/" + rel : rel] = d;
        }
      }
    }
    prepare_out(inv.common.out);
    bool failed = false;
    if (command == "datagen") manifest.config = datagen(inv.common, inv.datagen);
    else if (command == "aggregate") manifest.config = aggregate(inv.common, inv.aggregate, threads);
    else if (command == "stats") manifest.config = stats(inv.common, inv.stats);
    else if (command == "train") manifest.config = train(inv.common, inv.data, inv.model);
    else if (command == "eval") manifest.config = eval(inv.common, inv.data, inv.eval);
    else if (command == "ablate")
      manifest.config = ablate(inv.common, inv.data, inv.model, inv.rows, threads);
    else if (command == "gradcheck") manifest.config = gradcheck(inv.common, failed);
    manifest.outputs = tree_digests(inv.common.out, {Manifest::kFileName});
    manifest.write(inv.common.out);
    if (failed) {
      std::cerr << "gradcheck: at least one check reached the tolerance\n";
      return kExitData;
    }
  }
  return kExitOk;
}

int replay(const std::string& program, const Invocation& inv) {
  const Manifest recorded = Manifest::read(inv.manifest);
  for (const auto& [option, digests] : recorded.inputs) {
    std::map<std::string, std::string> now;
    for (const std::string& v : recorded.options.at(option)) {
      for (auto& [rel, d] : tree_digests(v)) {
        const auto& values = recorded.options.at(option);
        now[values.size() > 1 ? fs::path(v).filename().string() + "/" + rel : rel] = d;
      }
    }
    if (!compare_digests(digests, now).empty()) {
      std::cerr << "replay: input --" << option << " differs from the manifest\n";
      return kExitData;
    }
  }
  std::vector<std::string> args = {program, recorded.command};
  for (const auto& [name, values] : recorded.options) {
    for (const std::string& v : values) args.push_back("--" + name + "=" + v);
  }
  args.push_back("--out=" + inv.common.out.string());
  const int code = run(args);
  if (code != kExitOk) return code;
  const Manifest again = Manifest::read(inv.common.out / Manifest::kFileName);
  const DigestDiff diff = compare_digests(recorded.outputs, again.outputs);
  for (const auto& f : diff.missing) std::cerr << "replay: missing " << f << '\n';
  for (const auto& f : diff.unexpected) std::cerr << "replay: unexpected " << f << '\n';
  for (const auto& f : diff.changed) std::cerr << "replay: digest differs " << f << '\n';
  if (!diff.empty()) return kExitData;
  std::cout << "replay: " << recorded.outputs.size() << " outputs identical\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Multi-step modality fusion for CTR prediction", "m2fn"};
  app.set_version_flag("--version", M2FN_VERSION);
  app.require_subcommand(1);
  app.set_config("--config", "", "INI file; [section] per subcommand, flags win");
  app.config_formatter(std::make_shared<CLI::ConfigINI>());
  Invocation inv;

  CLI::App* datagen = app.add_subcommand("datagen", "Generate a synthetic impression log");
  add_common(datagen, inv);
  datagen->add_option("--synth-config", inv.datagen.synth_config, "Generator config (JSON)")
      ->check(CLI::ExistingFile);
  datagen->add_option("--n-images", inv.datagen.images);
  datagen->add_option("--records", inv.datagen.records);
  datagen->add_option("--campaigns", inv.datagen.campaigns, "Campaigns per image");
  datagen->add_option("--image-size", inv.datagen.image_size);
  datagen->add_flag("--null-model", inv.datagen.null_model, "All planted effects zero");

  CLI::App* aggregate = app.add_subcommand("aggregate", "Group impressions into CTR instances");
  add_common(aggregate, inv);
  aggregate->add_option("--input", inv.aggregate.inputs, "Impression logs (JSONL or CSV)")
      ->required()
      ->check(CLI::ExistingFile);
  aggregate->add_option("--format", inv.aggregate.format)
      ->check(CLI::IsMember({"auto", "jsonl", "csv"}))
      ->capture_default_str();
  aggregate->add_option("--min-impressions", inv.aggregate.min_impressions,
                        "Threshold (default: preset, else 100)");
  aggregate->add_option("--images", inv.aggregate.images, "Annotate dominant_color from images")
      ->check(CLI::ExistingDirectory);
  aggregate->add_option("--schema", inv.aggregate.schema)->check(CLI::ExistingFile);
  aggregate->add_option("--merge-rare", inv.aggregate.merge_rare, "Attributes to merge rare levels of");
  aggregate->add_option("--rare-threshold", inv.aggregate.rare_threshold)->capture_default_str();

  CLI::App* stats = app.add_subcommand("stats", "ANOVA and logistic attribute selection");
  add_common(stats, inv);
  stats->add_option("--instances", inv.stats.instances)->required()->check(CLI::ExistingFile);
  stats->add_option("--schema", inv.stats.schema)->required()->check(CLI::ExistingFile);
  stats->add_option("--alpha", inv.stats.alpha)->capture_default_str();

  CLI::App* train = app.add_subcommand("train", "Train one model and evaluate on a held-out split");
  add_common(train, inv);
  add_data(train, inv);
  add_model(train, inv);

  CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_common(eval, inv);
  add_data(eval, inv);
  eval->add_option("--model", inv.eval.model)->required()->check(CLI::ExistingFile);
  eval->add_option("--split", inv.eval.split)
      ->check(CLI::IsMember({"all", "train", "test"}))
      ->capture_default_str();
  eval->add_option("--test-fraction", inv.eval.test_fraction)->capture_default_str();

  CLI::App* ablate = app.add_subcommand("ablate", "Train the module grid");
  add_common(ablate, inv);
  add_data(ablate, inv);
  add_model(ablate, inv);
  ablate->add_option("--rows", inv.rows, "Toggle codes (default: the eight grid rows)");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  add_common(gradcheck, inv);

  CLI::App* replay_cmd = app.add_subcommand("replay", "Re-run a manifest and compare digests");
  replay_cmd->add_option("--manifest", inv.manifest)->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--out", inv.common.out, "Output directory for the re-run")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (replay_cmd->parsed()) return replay(args.front(), inv);
    return dispatch(app, inv);
  } catch (const ConfigError& e) {
    std::cerr << "m2fn: usage: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "m2fn: error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace m2fn::cli
