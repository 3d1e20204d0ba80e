#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace m2fn {

using AttributeMap = std::map<std::string, std::string>;

// One ad exposure.
struct ImpressionRecord {
  std::string image_id;
  AttributeMap attributes;
  bool clicked = false;

  bool operator==(const ImpressionRecord&) const = default;
};

// One unique (image, attribute tuple) exposure with its click-through rate.
struct AggregatedInstance {
  std::string image_id;
  AttributeMap attributes;
  double y = 0.0;            // clicks / w
  std::uint64_t w = 0;       // impressions
  std::uint64_t clicks = 0;

  // Canonical group key: image id then name=value pairs in name order.
  std::string key() const;
  bool operator==(const AggregatedInstance&) const = default;
};

std::string group_key(const std::string& image_id, const AttributeMap& attributes);

struct ReadReport {
  std::size_t lines = 0;
  std::size_t accepted = 0;
  // (1-based line number, reason) per rejected line.
  std::vector<std::pair<std::size_t, std::string>> rejects;
};

using RecordSink = std::function<void(ImpressionRecord&&)>;

// JSON Lines: {"image_id": str, "attributes": {str: str}, "clicked": 0|1|bool}.
// Malformed lines, or lines missing a `required` attribute, are counted in
// the report and skipped. Blank lines are ignored.
void read_jsonl(std::istream& in, const RecordSink& sink, ReadReport& report,
                std::span<const std::string> required = {});
// CSV with a header row naming image_id, clicked and one column per
// attribute. Fields may be double-quoted with "" as an escaped quote.
void read_csv(std::istream& in, const RecordSink& sink, ReadReport& report,
              std::span<const std::string> required = {});

std::string record_to_jsonl(const ImpressionRecord& record);
std::optional<ImpressionRecord> parse_record_json(std::string_view line, std::string* error);

// Streaming group-and-count fold. Partial aggregators over disjoint shards
// merge to the same result as one pass.
class Aggregator {
 public:
  void add(const ImpressionRecord& record);
  void merge(const Aggregator& other);
  // Groups with at least `min_impressions` records, sorted by key.
  std::vector<AggregatedInstance> finish(std::uint64_t min_impressions) const;
  std::size_t groups() const { return groups_.size(); }
  std::uint64_t records() const { return records_; }

 private:
  struct Group {
    std::string image_id;
    AttributeMap attributes;
    std::uint64_t w = 0;
    std::uint64_t clicks = 0;
  };
  std::map<std::string, Group> groups_;
  std::uint64_t records_ = 0;
};

std::vector<AggregatedInstance> aggregate(std::span<const ImpressionRecord> records,
                                          std::uint64_t min_impressions);

std::string instance_to_jsonl(const AggregatedInstance& instance);
void write_instances(std::ostream& out, std::span<const AggregatedInstance> instances);
// Throws DataError naming the line on malformed input or y != clicks / w.
std::vector<AggregatedInstance> read_instances(std::istream& in);

struct LevelMerge {
  std::string from;
  std::string to;
  std::uint64_t impressions = 0;  // summed w of `from` when it was merged
};

struct MergeResult {
  std::vector<AggregatedInstance> instances;
  std::vector<LevelMerge> merges;         // in the order they happened
  std::map<std::string, std::string> mapping;  // original level -> final level
};

// Relabels every level of `attribute` whose summed w is below `threshold` to
// its closest level until none remain or one level is left. The rarest level
// goes first. For ordinal attributes the closest level is the adjacent one
// (in `level_order`) with larger total w; for nominal ones it is the level
// whose mean CTR is nearest. Instances that become identical are re-merged.
MergeResult merge_rare_levels(std::span<const AggregatedInstance> instances,
                              const std::string& attribute, bool ordinal,
                              std::span<const std::string> level_order = {},
                              std::uint64_t threshold = 50000);

// Per-level CTR summary in level order.
struct CtrBar {
  std::string level;
  double ctr = 0.0;
  std::uint64_t impressions = 0;
  std::uint64_t clicks = 0;
};

// Levels follow `level_order` when given, then any unlisted levels sorted.
std::vector<CtrBar> ctr_bars(std::span<const AggregatedInstance> instances,
                             const std::string& attribute,
                             std::span<const std::string> level_order = {});

}  // namespace m2fn
