#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "m2fn/model.hpp"
#include "m2fn/train.hpp"

namespace m2fn::cli {

struct Common {
  std::uint64_t seed = 0;
  std::filesystem::path out;
  std::string preset;  // empty, "realad-100", "realad-500" or "ava-like"
};

struct DatagenArgs {
  std::string synth_config;  // JSON generator config; flags below override it
  std::size_t images = 0;    // 0 keeps the config value
  std::uint64_t records = 0;
  std::size_t campaigns = 0;
  std::size_t image_size = 0;
  bool null_model = false;
};

struct AggregateArgs {
  std::vector<std::string> inputs;
  std::string format = "auto";  // auto, jsonl or csv
  std::uint64_t min_impressions = 0;  // 0 takes the preset threshold, else 100
  std::string images;  // optional; annotates dominant_color
  std::string schema;  // level order and ordinal flags for --merge-rare
  std::vector<std::string> merge_rare;
  std::uint64_t rare_threshold = 50000;
};

struct StatsArgs {
  std::string instances;
  std::string schema;
  double alpha = 0.05;
};

struct DataArgs {
  std::string instances;
  std::string schema;
  std::string images;
  std::string titles;  // embedding store directory, when the schema has embeddings
};

struct ModelArgs {
  std::string toggles = "aux,low,att,high";
  std::string loss = "wmse";
  std::size_t epochs = 80;
  std::size_t batch = 32;
  double lr = 0.03;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::size_t image_size = 16;
  std::string backbone = "8p,16p,32";
  std::size_t cbn_hidden = 0;  // 0 takes the preset or desk width
  std::size_t attn_hidden = 0;
  std::size_t high_dim = 0;
  double test_fraction = 0.2;
  bool raw_weights = false;
};

struct EvalArgs {
  std::string model;
  std::string split = "all";  // all, train or test
  double test_fraction = 0.2;
};

// Commands write their artifacts under common.out and return the effective
// configuration recorded in the manifest. Failures throw.
nlohmann::json datagen(const Common& common, const DatagenArgs& args);
nlohmann::json aggregate(const Common& common, const AggregateArgs& args, std::size_t threads);
nlohmann::json stats(const Common& common, const StatsArgs& args);
nlohmann::json train(const Common& common, const DataArgs& data, const ModelArgs& args);
nlohmann::json eval(const Common& common, const DataArgs& data, const EvalArgs& args);
nlohmann::json ablate(const Common& common, const DataArgs& data, const ModelArgs& args,
                      const std::vector<std::string>& rows, std::size_t threads);
// Sets `failed` when any entry reaches the tolerance.
nlohmann::json gradcheck(const Common& common, bool& failed);

// "8p,16p,32": output channels per 3x3 stage, "p" adds 2x2 max-pooling.
std::vector<ConvStage> parse_backbone(const std::string& spec);

}  // namespace m2fn::cli
