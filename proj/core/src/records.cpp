#include "m2fn/records.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>

#include "m2fn/errors.hpp"

namespace m2fn {

using nlohmann::json;

std::string group_key(const std::string& image_id, const AttributeMap& attributes) {
  // Unit separators keep keys unambiguous for any printable content.
  std::string key = image_id;
  for (const auto& [name, value] : attributes) {
    key += '\x1f';
    key += name;
    key += '\x1e';
    key += value;
  }
  return key;
}

std::string AggregatedInstance::key() const { return group_key(image_id, attributes); }

namespace {

std::string check_required(const ImpressionRecord& r, std::span<const std::string> required) {
  for (const std::string& name : required) {
    if (!r.attributes.contains(name)) return "missing attribute '" + name + "'";
  }
  return {};
}

bool blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

std::string attribute_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  throw std::runtime_error("attribute values must be strings, integers or booleans");
}

bool parse_clicked(const json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number_integer()) {
    const auto c = v.get<long long>();
    if (c == 0 || c == 1) return c == 1;
  }
  throw std::runtime_error("'clicked' must be 0, 1, true or false");
}

// Splits one CSV line. Returns false on an unterminated quote.
bool split_csv(const std::string& line, std::vector<std::string>& fields) {
  fields.clear();
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  if (quoted) return false;
  fields.push_back(std::move(field));
  return true;
}

}  // namespace

std::optional<ImpressionRecord> parse_record_json(std::string_view line, std::string* error) {
  try {
    const json j = json::parse(line);
    if (!j.is_object()) throw std::runtime_error("line is not a JSON object");
    ImpressionRecord r;
    const auto id = j.find("image_id");
    if (id == j.end() || !id->is_string()) throw std::runtime_error("missing string 'image_id'");
    r.image_id = id->get<std::string>();
    if (r.image_id.empty()) throw std::runtime_error("empty 'image_id'");
    const auto clicked = j.find("clicked");
    if (clicked == j.end()) throw std::runtime_error("missing 'clicked'");
    r.clicked = parse_clicked(*clicked);
    if (const auto attrs = j.find("attributes"); attrs != j.end()) {
      if (!attrs->is_object()) throw std::runtime_error("'attributes' must be an object");
      for (const auto& [name, value] : attrs->items()) r.attributes[name] = attribute_text(value);
    }
    return r;
  } catch (const std::exception& e) {
    if (error) *error = e.what();
    return std::nullopt;
  }
}

void read_jsonl(std::istream& in, const RecordSink& sink, ReadReport& report,
                std::span<const std::string> required) {
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (blank(line)) continue;
    ++report.lines;
    std::string error;
    auto record = parse_record_json(line, &error);
    if (record && error.empty()) error = check_required(*record, required);
    if (!record || !error.empty()) {
      report.rejects.emplace_back(number, error);
      continue;
    }
    ++report.accepted;
    sink(std::move(*record));
  }
}

void read_csv(std::istream& in, const RecordSink& sink, ReadReport& report,
              std::span<const std::string> required) {
  std::string line;
  std::vector<std::string> header, fields;
  std::size_t number = 0;
  while (header.empty() && std::getline(in, line)) {
    ++number;
    if (blank(line)) continue;
    if (!split_csv(line, header)) throw DataError("csv: unterminated quote in header");
  }
  const auto column = [&](const char* name) -> std::size_t {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError(std::string("csv: header lacks column '") + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  if (header.empty()) return;
  const std::size_t id_col = column("image_id"), click_col = column("clicked");
  while (std::getline(in, line)) {
    ++number;
    if (blank(line)) continue;
    ++report.lines;
    std::string error;
    if (!split_csv(line, fields)) {
      error = "unterminated quote";
    } else if (fields.size() != header.size()) {
      error = "expected " + std::to_string(header.size()) + " fields, got " +
              std::to_string(fields.size());
    }
    ImpressionRecord r;
    if (error.empty()) {
      r.image_id = fields[id_col];
      const std::string& c = fields[click_col];
      if (r.image_id.empty()) {
        error = "empty image_id";
      } else if (c == "1" || c == "true") {
        r.clicked = true;
      } else if (c != "0" && c != "false") {
        error = "'clicked' must be 0, 1, true or false";
      }
    }
    if (error.empty()) {
      for (std::size_t i = 0; i < header.size(); ++i) {
        if (i != id_col && i != click_col) r.attributes[header[i]] = fields[i];
      }
      error = check_required(r, required);
    }
    if (!error.empty()) {
      report.rejects.emplace_back(number, error);
      continue;
    }
    ++report.accepted;
    sink(std::move(r));
  }
}

std::string record_to_jsonl(const ImpressionRecord& record) {
  json j;
  j["image_id"] = record.image_id;
  j["attributes"] = record.attributes;
  j["clicked"] = record.clicked ? 1 : 0;
  return j.dump();
}

void Aggregator::add(const ImpressionRecord& record) {
  auto [it, fresh] = groups_.try_emplace(group_key(record.image_id, record.attributes));
  if (fresh) {
    it->second.image_id = record.image_id;
    it->second.attributes = record.attributes;
  }
  ++it->second.w;
  it->second.clicks += record.clicked ? 1 : 0;
  ++records_;
}

void Aggregator::merge(const Aggregator& other) {
  for (const auto& [key, g] : other.groups_) {
    auto [it, fresh] = groups_.try_emplace(key, g);
    if (!fresh) {
      it->second.w += g.w;
      it->second.clicks += g.clicks;
    }
  }
  records_ += other.records_;
}

std::vector<AggregatedInstance> Aggregator::finish(std::uint64_t min_impressions) const {
  if (min_impressions == 0) throw ContractError("aggregate: min_impressions must be positive");
  std::vector<AggregatedInstance> out;
  for (const auto& [key, g] : groups_) {
    if (g.w < min_impressions) continue;
    out.push_back(AggregatedInstance{g.image_id, g.attributes,
                                     static_cast<double>(g.clicks) / static_cast<double>(g.w),
                                     g.w, g.clicks});
  }
  return out;
}

std::vector<AggregatedInstance> aggregate(std::span<const ImpressionRecord> records,
                                          std::uint64_t min_impressions) {
  Aggregator agg;
  for (const ImpressionRecord& r : records) agg.add(r);
  return agg.finish(min_impressions);
}

std::string instance_to_jsonl(const AggregatedInstance& instance) {
  json j;
  j["image_id"] = instance.image_id;
  j["attributes"] = instance.attributes;
  j["y"] = instance.y;
  j["w"] = instance.w;
  j["clicks"] = instance.clicks;
  return j.dump(-1, ' ', false, json::error_handler_t::strict);
}

void write_instances(std::ostream& out, std::span<const AggregatedInstance> instances) {
  for (const AggregatedInstance& inst : instances) out << instance_to_jsonl(inst) << '\n';
}

std::vector<AggregatedInstance> read_instances(std::istream& in) {
  std::vector<AggregatedInstance> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (blank(line)) continue;
    try {
      const json j = json::parse(line);
      AggregatedInstance inst;
      inst.image_id = j.at("image_id").get<std::string>();
      inst.attributes = j.at("attributes").get<AttributeMap>();
      inst.w = j.at("w").get<std::uint64_t>();
      inst.clicks = j.at("clicks").get<std::uint64_t>();
      inst.y = j.at("y").get<double>();
      if (inst.w == 0 || inst.clicks > inst.w) throw std::runtime_error("need 0 <= clicks <= w, w > 0");
      if (inst.y != static_cast<double>(inst.clicks) / static_cast<double>(inst.w)) {
        throw std::runtime_error("y != clicks / w");
      }
      out.push_back(std::move(inst));
    } catch (const std::exception& e) {
      throw DataError("instances line " + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

namespace {

struct LevelTotals {
  std::uint64_t w = 0;
  std::uint64_t clicks = 0;
  double ctr() const { return w ? static_cast<double>(clicks) / static_cast<double>(w) : 0.0; }
};

// Present levels of `attribute`: listed order first, then the rest sorted.
std::vector<std::string> ordered_levels(const std::map<std::string, LevelTotals>& totals,
                                        std::span<const std::string> level_order) {
  std::vector<std::string> levels;
  std::set<std::string> listed;
  for (const std::string& l : level_order) {
    listed.insert(l);
    if (totals.contains(l)) levels.push_back(l);
  }
  for (const auto& [l, t] : totals) {
    if (!listed.contains(l)) levels.push_back(l);
  }
  return levels;
}

std::vector<AggregatedInstance> reaggregate(std::vector<AggregatedInstance> instances) {
  std::map<std::string, AggregatedInstance> merged;
  for (AggregatedInstance& inst : instances) {
    auto [it, fresh] = merged.try_emplace(inst.key(), inst);
    if (!fresh) {
      it->second.w += inst.w;
      it->second.clicks += inst.clicks;
    }
  }
  std::vector<AggregatedInstance> out;
  out.reserve(merged.size());
  for (auto& [key, inst] : merged) {
    inst.y = static_cast<double>(inst.clicks) / static_cast<double>(inst.w);
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace

MergeResult merge_rare_levels(std::span<const AggregatedInstance> instances,
                              const std::string& attribute, bool ordinal,
                              std::span<const std::string> level_order, std::uint64_t threshold) {
  MergeResult result;
  result.instances.assign(instances.begin(), instances.end());
  for (const AggregatedInstance& inst : instances) {
    const auto it = inst.attributes.find(attribute);
    if (it == inst.attributes.end()) {
      throw SchemaError("merge_rare_levels: instance " + inst.image_id + " lacks attribute '" +
                        attribute + "'");
    }
    result.mapping.emplace(it->second, it->second);
  }
  while (true) {
    std::map<std::string, LevelTotals> totals;
    for (const AggregatedInstance& inst : result.instances) {
      LevelTotals& t = totals[inst.attributes.at(attribute)];
      t.w += inst.w;
      t.clicks += inst.clicks;
    }
    const std::vector<std::string> levels = ordered_levels(totals, level_order);
    if (levels.size() <= 1) break;
    std::size_t rare = levels.size();
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const std::uint64_t w = totals[levels[i]].w;
      if (w < threshold && (rare == levels.size() || w < totals[levels[rare]].w)) rare = i;
    }
    if (rare == levels.size()) break;

    std::size_t target = levels.size();
    if (ordinal) {
      for (const std::size_t j : {rare - 1, rare + 1}) {
        if (j >= levels.size()) continue;  // rare - 1 wraps for rare == 0
        if (target == levels.size() || totals[levels[j]].w > totals[levels[target]].w) target = j;
      }
    } else {
      const double ctr = totals[levels[rare]].ctr();
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < levels.size(); ++j) {
        if (j == rare) continue;
        const double d = std::abs(totals[levels[j]].ctr() - ctr);
        if (d < best || (d == best && totals[levels[j]].w > totals[levels[target]].w)) {
          best = d;
          target = j;
        }
      }
    }
    const std::string from = levels[rare], to = levels[target];
    result.merges.push_back(LevelMerge{from, to, totals[from].w});
    for (auto& [original, current] : result.mapping) {
      if (current == from) current = to;
    }
    for (AggregatedInstance& inst : result.instances) {
      std::string& level = inst.attributes[attribute];
      if (level == from) level = to;
    }
    result.instances = reaggregate(std::move(result.instances));
  }
  if (result.merges.empty()) {
    std::sort(result.instances.begin(), result.instances.end(),
              [](const AggregatedInstance& a, const AggregatedInstance& b) { return a.key() < b.key(); });
  }
  return result;
}

std::vector<CtrBar> ctr_bars(std::span<const AggregatedInstance> instances,
                             const std::string& attribute,
                             std::span<const std::string> level_order) {
  std::map<std::string, LevelTotals> totals;
  for (const AggregatedInstance& inst : instances) {
    const auto it = inst.attributes.find(attribute);
    if (it == inst.attributes.end()) continue;
    LevelTotals& t = totals[it->second];
    t.w += inst.w;
    t.clicks += inst.clicks;
  }
  std::vector<CtrBar> bars;
  for (const std::string& level : ordered_levels(totals, level_order)) {
    const LevelTotals& t = totals[level];
    bars.push_back(CtrBar{level, t.ctr(), t.w, t.clicks});
  }
  return bars;
}

}  // namespace m2fn
