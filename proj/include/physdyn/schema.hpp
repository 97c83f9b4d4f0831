#pragma once

#include <array>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "physdyn/errors.hpp"

namespace physdyn {

using json = nlohmann::json;

inline constexpr std::size_t kNumAttributes = 38;
inline constexpr std::size_t kNumActions = 10;
inline constexpr int kSchemaVersion = 1;

// Attribute order is load-bearing: slot 0 (ObjectName) is the slot whose
// encoder output summarizes the object.
inline constexpr std::array<std::string_view, kNumAttributes> kAttributeNames = {
    "ObjectName",
    "parentReceptacles",
    "receptacleObjectIds",
    "distance",
    "mass",
    "size",
    "ObjectTemperature",
    "breakable",
    "cookable",
    "dirtyable",
    "isBroken",
    "isCooked",
    "isDirty",
    "isFilledWithLiquid",
    "isOpen",
    "isPickedUp",
    "isSliced",
    "isToggled",
    "moveable",
    "openable",
    "pickupable",
    "receptacle",
    "salientMaterials_Ceramic",
    "salientMaterials_Fabric",
    "salientMaterials_Food",
    "salientMaterials_Glass",
    "salientMaterials_Leather",
    "salientMaterials_Metal",
    "salientMaterials_Paper",
    "salientMaterials_Plastic",
    "salientMaterials_Rubber",
    "salientMaterials_Soap",
    "salientMaterials_Sponge",
    "salientMaterials_Stone",
    "salientMaterials_Wax",
    "salientMaterials_Wood",
    "sliceable",
    "toggleable",
};

namespace attr {
inline constexpr std::size_t kObjectName = 0;
inline constexpr std::size_t kParentReceptacles = 1;
inline constexpr std::size_t kReceptacleObjectIds = 2;
inline constexpr std::size_t kDistance = 3;
inline constexpr std::size_t kMass = 4;
inline constexpr std::size_t kSize = 5;
inline constexpr std::size_t kTemperature = 6;
inline constexpr std::size_t kBreakable = 7;
inline constexpr std::size_t kCookable = 8;
inline constexpr std::size_t kDirtyable = 9;
inline constexpr std::size_t kIsBroken = 10;
inline constexpr std::size_t kIsCooked = 11;
inline constexpr std::size_t kIsDirty = 12;
inline constexpr std::size_t kIsFilledWithLiquid = 13;
inline constexpr std::size_t kIsOpen = 14;
inline constexpr std::size_t kIsPickedUp = 15;
inline constexpr std::size_t kIsSliced = 16;
inline constexpr std::size_t kIsToggled = 17;
inline constexpr std::size_t kMoveable = 18;
inline constexpr std::size_t kOpenable = 19;
inline constexpr std::size_t kPickupable = 20;
inline constexpr std::size_t kReceptacle = 21;
inline constexpr std::size_t kFirstMaterial = 22;
inline constexpr std::size_t kNumMaterials = 14;
inline constexpr std::size_t kSliceable = 36;
inline constexpr std::size_t kToggleable = 37;
}  // namespace attr

enum class Action : std::uint8_t {
  kClose = 0,
  kDirty,
  kEmptyLiquid,
  kHeatUpPan,
  kOpen,
  kPickup,
  kPut,
  kSlice,
  kToggleOff,
  kToggleOn,
};

inline constexpr std::array<std::string_view, kNumActions> kActionNames = {
    "Close", "Dirty", "EmptyLiquid", "HeatUpPan", "Open",
    "Pickup", "Put", "Slice", "ToggleOff", "ToggleOn",
};

inline std::string_view action_name(int id) {
  if (id < 0 || id >= static_cast<int>(kNumActions)) return "Unknown";
  return kActionNames[static_cast<std::size_t>(id)];
}

// Accepts the short names as well as the long simulator spellings used in
// exclusion lists (e.g. "PickupObject", "EmptyLiquidFromObject").
inline std::optional<int> parse_action(std::string_view name) {
  static const std::unordered_map<std::string_view, int> kAliases = {
      {"CloseObject", 0},           {"DirtyObject", 1},
      {"EmptyLiquidFromObject", 2}, {"OpenObject", 4},
      {"PickupObject", 5},          {"PutObject", 6},
      {"SliceObject", 7},           {"ToggleObjectOff", 8},
      {"ToggleObjectOn", 9},
  };
  for (std::size_t i = 0; i < kNumActions; ++i) {
    if (kActionNames[i] == name) return static_cast<int>(i);
  }
  if (auto it = kAliases.find(name); it != kAliases.end()) return it->second;
  return std::nullopt;
}

// "CounterTop" -> "counter top"; used to turn vocabulary entries into text labels.
inline std::string label_text(std::string_view name) {
  std::string out;
  for (std::size_t i = 0; i < name.size(); ++i) {
    const char c = name[i];
    if (c == '_') {
      out.push_back(' ');
      continue;
    }
    if (std::isupper(static_cast<unsigned char>(c)) && i > 0 &&
        std::islower(static_cast<unsigned char>(name[i - 1]))) {
      out.push_back(' ');
    }
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

// Contiguous slice of the global value vocabulary owned by one attribute.
struct AttributeRange {
  std::size_t offset = 0;
  std::size_t size = 0;
};

struct AttributeDescriptor {
  std::string name;
  std::vector<std::string> values;
  std::size_t value_offset = 0;
};

class AttributeSchema {
 public:
  AttributeSchema() = default;

  // Vocabularies in slot order; must name exactly the 38 attributes.
  static AttributeSchema from_vocabularies(
      std::vector<std::pair<std::string, std::vector<std::string>>> vocabularies) {
    if (vocabularies.size() != kNumAttributes) {
      throw ValidationError("attribute schema needs " + std::to_string(kNumAttributes) +
                            " attributes, got " + std::to_string(vocabularies.size()));
    }
    AttributeSchema schema;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < vocabularies.size(); ++i) {
      auto& [name, values] = vocabularies[i];
      if (name != kAttributeNames[i]) {
        throw ValidationError("attribute " + std::to_string(i) + " must be " +
                              std::string(kAttributeNames[i]) + ", got " + name);
      }
      if (values.empty()) throw ValidationError("attribute " + name + " has an empty vocabulary");
      std::set<std::string> unique(values.begin(), values.end());
      if (unique.size() != values.size()) {
        throw ValidationError("attribute " + name + " has duplicate vocabulary entries");
      }
      schema.attributes_.push_back({std::move(name), std::move(values), offset});
      offset += schema.attributes_.back().values.size();
    }
    schema.total_values_ = offset;
    schema.owner_.reserve(offset);
    for (std::size_t i = 0; i < schema.attributes_.size(); ++i) {
      for (std::size_t v = 0; v < schema.attributes_[i].values.size(); ++v) {
        schema.owner_.push_back({i, v});
      }
    }
    return schema;
  }

  std::size_t size() const { return attributes_.size(); }
  std::size_t total_values() const { return total_values_; }
  const AttributeDescriptor& attribute(std::size_t i) const { return attributes_.at(i); }
  std::size_t vocabulary_size(std::size_t i) const { return attributes_.at(i).values.size(); }

  std::size_t global_index(std::size_t attribute, std::size_t value) const {
    const auto& a = attributes_.at(attribute);
    if (value >= a.values.size()) {
      throw ValidationError("value " + std::to_string(value) + " out of range for attribute " + a.name);
    }
    return a.value_offset + value;
  }

  // Inverse of global_index.
  std::pair<std::size_t, std::size_t> decode(std::size_t global) const { return owner_.at(global); }

  std::vector<AttributeRange> ranges() const {
    std::vector<AttributeRange> out;
    out.reserve(attributes_.size());
    for (const auto& a : attributes_) out.push_back({a.value_offset, a.values.size()});
    return out;
  }

  std::optional<std::size_t> find_value(std::size_t attribute, std::string_view value) const {
    const auto& vals = attributes_.at(attribute).values;
    for (std::size_t v = 0; v < vals.size(); ++v) {
      if (vals[v] == value) return v;
    }
    return std::nullopt;
  }

  std::size_t value_index(std::size_t attribute, std::string_view value) const {
    if (auto v = find_value(attribute, value)) return *v;
    throw ValidationError("unknown value '" + std::string(value) + "' for attribute " +
                          attributes_.at(attribute).name);
  }

  const std::string& object_name(std::size_t value) const {
    return attributes_.at(attr::kObjectName).values.at(value);
  }

  json to_json() const {
    json attrs = json::array();
    for (const auto& a : attributes_) attrs.push_back({{"name", a.name}, {"values", a.values}});
    return {{"schema_version", kSchemaVersion}, {"attributes", attrs}};
  }

  static AttributeSchema from_json(const json& j) {
    if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kSchemaVersion) {
      throw ValidationError("unsupported schema_version");
    }
    std::vector<std::pair<std::string, std::vector<std::string>>> vocab;
    for (const auto& a : j.at("attributes")) {
      vocab.emplace_back(a.at("name").get<std::string>(), a.at("values").get<std::vector<std::string>>());
    }
    return from_vocabularies(std::move(vocab));
  }

  bool operator==(const AttributeSchema& other) const {
    if (attributes_.size() != other.attributes_.size()) return false;
    for (std::size_t i = 0; i < attributes_.size(); ++i) {
      if (attributes_[i].name != other.attributes_[i].name ||
          attributes_[i].values != other.attributes_[i].values) {
        return false;
      }
    }
    return true;
  }

 private:
  std::vector<AttributeDescriptor> attributes_;
  std::vector<std::pair<std::size_t, std::size_t>> owner_;
  std::size_t total_values_ = 0;
};

// A schema with the standard attribute names and vocabularies of the given
// sizes, entries named "<attribute>_<k>". Useful where only the layout matters.
inline AttributeSchema make_placeholder_schema(const std::array<std::size_t, kNumAttributes>& sizes) {
  std::vector<std::pair<std::string, std::vector<std::string>>> vocab;
  for (std::size_t i = 0; i < kNumAttributes; ++i) {
    std::vector<std::string> values;
    for (std::size_t k = 0; k < sizes[i]; ++k) {
      values.push_back(std::string(kAttributeNames[i]) + "_" + std::to_string(k));
    }
    vocab.emplace_back(std::string(kAttributeNames[i]), std::move(values));
  }
  return AttributeSchema::from_vocabularies(std::move(vocab));
}

struct ObjectState {
  // Local value index per attribute slot.
  std::vector<std::uint16_t> values;
  // Absent-object placeholder; skipped by every loss and metric.
  bool is_none = false;

  bool operator==(const ObjectState&) const = default;
};

struct ActionRecord {
  int action_id = 0;
  // Indices into the ObjectName vocabulary (which sits at global offset 0).
  int object_name = 0;
  int receptacle_name = 0;
  std::optional<std::string> text;

  bool operator==(const ActionRecord&) const = default;
};

enum class SplitTag : std::uint8_t { kTrain, kVal, kTest, kZeroShot };

inline std::string_view split_tag_name(SplitTag t) {
  switch (t) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
    case SplitTag::kZeroShot: return "zero_shot";
  }
  return "unknown";
}

struct TrajectoryRecord {
  std::string id;
  std::array<ObjectState, 2> objects_pre;
  std::array<ObjectState, 2> objects_post;
  ActionRecord action;
  std::string image_pre;
  std::string image_post;
  std::set<SplitTag> split_tags;

  bool operator==(const TrajectoryRecord&) const = default;
};

// --- serialization -------------------------------------------------------

inline json object_to_json(const ObjectState& o) { return {{"values", o.values}, {"none", o.is_none}}; }

inline ObjectState object_from_json(const json& j) {
  ObjectState o;
  o.values = j.at("values").get<std::vector<std::uint16_t>>();
  o.is_none = j.value("none", false);
  return o;
}

inline json record_to_json(const TrajectoryRecord& r) {
  json action = {{"id", r.action.action_id},
                 {"object", r.action.object_name},
                 {"receptacle", r.action.receptacle_name}};
  if (r.action.text) action["text"] = *r.action.text;
  json j = {{"id", r.id},
            {"objects_pre", {object_to_json(r.objects_pre[0]), object_to_json(r.objects_pre[1])}},
            {"objects_post", {object_to_json(r.objects_post[0]), object_to_json(r.objects_post[1])}},
            {"action", action},
            {"image_pre", r.image_pre},
            {"image_post", r.image_post}};
  if (!r.split_tags.empty()) {
    json tags = json::array();
    for (auto t : r.split_tags) tags.push_back(split_tag_name(t));
    j["split_tags"] = tags;
  }
  return j;
}

inline TrajectoryRecord record_from_json(const json& j) {
  TrajectoryRecord r;
  r.id = j.at("id").get<std::string>();
  const auto& pre = j.at("objects_pre");
  const auto& post = j.at("objects_post");
  if (pre.size() != 2 || post.size() != 2) {
    throw ValidationError("record " + r.id + ": expected exactly two object slots");
  }
  for (std::size_t k = 0; k < 2; ++k) {
    r.objects_pre[k] = object_from_json(pre[k]);
    r.objects_post[k] = object_from_json(post[k]);
  }
  const auto& a = j.at("action");
  r.action.action_id = a.at("id").get<int>();
  r.action.object_name = a.at("object").get<int>();
  r.action.receptacle_name = a.at("receptacle").get<int>();
  if (a.contains("text")) r.action.text = a.at("text").get<std::string>();
  r.image_pre = j.at("image_pre").get<std::string>();
  r.image_post = j.at("image_post").get<std::string>();
  if (j.contains("split_tags")) {
    for (const auto& t : j.at("split_tags")) {
      const auto s = t.get<std::string>();
      if (s == "train") r.split_tags.insert(SplitTag::kTrain);
      else if (s == "val") r.split_tags.insert(SplitTag::kVal);
      else if (s == "test") r.split_tags.insert(SplitTag::kTest);
      else if (s == "zero_shot") r.split_tags.insert(SplitTag::kZeroShot);
      else throw ValidationError("record " + r.id + ": unknown split tag " + s);
    }
  }
  return r;
}

inline std::vector<TrajectoryRecord> read_records(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<TrajectoryRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_records(const std::string& path, const std::vector<TrajectoryRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline AttributeSchema read_schema(const std::string& path) { return AttributeSchema::from_json(read_json_file(path)); }

// --- validation ----------------------------------------------------------

struct ValidationReport {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

inline ValidationReport validate_trajectory(const TrajectoryRecord& record, const AttributeSchema& schema) {
  ValidationReport report;
  auto check_object = [&](const ObjectState& o, std::string_view where) {
    if (o.values.size() != schema.size()) {
      report.violations.push_back(std::string(where) + ": attribute count " + std::to_string(o.values.size()) +
                                  " != " + std::to_string(schema.size()));
      return;
    }
    for (std::size_t i = 0; i < o.values.size(); ++i) {
      if (o.values[i] >= schema.vocabulary_size(i)) {
        report.violations.push_back(std::string(where) + ": value " + std::to_string(o.values[i]) +
                                    " out of range for " + schema.attribute(i).name + " (" +
                                    std::to_string(schema.vocabulary_size(i)) + " values)");
      }
    }
  };
  for (std::size_t k = 0; k < 2; ++k) {
    check_object(record.objects_pre[k], "objects_pre[" + std::to_string(k) + "]");
    check_object(record.objects_post[k], "objects_post[" + std::to_string(k) + "]");
    if (record.objects_pre[k].is_none != record.objects_post[k].is_none) {
      report.violations.push_back("object " + std::to_string(k) + ": none flag differs between pre and post");
    }
  }
  const auto& a = record.action;
  if (a.action_id < 0 || a.action_id >= static_cast<int>(kNumActions)) {
    report.violations.push_back("unknown action " + std::to_string(a.action_id));
  }
  const auto n_names = static_cast<int>(schema.vocabulary_size(attr::kObjectName));
  if (a.object_name < 0 || a.object_name >= n_names) {
    report.violations.push_back("action object " + std::to_string(a.object_name) + " out of range");
  }
  if (a.receptacle_name < 0 || a.receptacle_name >= n_names) {
    report.violations.push_back("action receptacle " + std::to_string(a.receptacle_name) + " out of range");
  }
  return report;
}

}  // namespace physdyn
