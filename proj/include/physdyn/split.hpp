#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "physdyn/errors.hpp"
#include "physdyn/schema.hpp"

namespace physdyn {

struct ExcludedPair {
  std::string action;
  std::string object;
  bool operator==(const ExcludedPair&) const = default;
};

struct SplitManifest {
  std::vector<std::string> train_ids;
  std::vector<std::string> val_ids;
  std::vector<std::string> test_ids;
  std::vector<std::string> excluded_objects;
  std::vector<ExcludedPair> excluded_pairs;
  std::vector<std::string> zero_shot_test_ids;
  std::uint64_t seed = 0;

  json to_json() const {
    json pairs = json::array();
    for (const auto& p : excluded_pairs) pairs.push_back({p.action, p.object});
    return {{"seed", seed},
            {"train_ids", train_ids},
            {"val_ids", val_ids},
            {"test_ids", test_ids},
            {"zero_shot_test_ids", zero_shot_test_ids},
            {"excluded_objects", excluded_objects},
            {"excluded_pairs", pairs}};
  }

  static SplitManifest from_json(const json& j) {
    SplitManifest m;
    m.seed = j.value("seed", std::uint64_t{0});
    m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    m.val_ids = j.at("val_ids").get<std::vector<std::string>>();
    m.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    m.zero_shot_test_ids = j.at("zero_shot_test_ids").get<std::vector<std::string>>();
    m.excluded_objects = j.at("excluded_objects").get<std::vector<std::string>>();
    for (const auto& p : j.at("excluded_pairs")) {
      m.excluded_pairs.push_back({p.at(0).get<std::string>(), p.at(1).get<std::string>()});
    }
    return m;
  }
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

namespace detail {
inline std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}
}  // namespace detail

// One object name per line; blank lines and '#' comments ignored.
inline std::vector<std::string> read_excluded_objects(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    if (line.back() == ',') line.pop_back();
    out.push_back(detail::trim(line));
  }
  return out;
}

// One "(Action,Object)" per line; parentheses and a trailing comma are optional.
inline std::vector<ExcludedPair> read_excluded_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<ExcludedPair> out;
  std::string line;
  while (std::getline(in, line)) {
    line = detail::trim(line);
    if (line.empty() || line.front() == '#') continue;
    if (line.back() == ',') line.pop_back();
    if (!line.empty() && line.front() == '(') line.erase(line.begin());
    if (!line.empty() && line.back() == ')') line.pop_back();
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ValidationError(path + ": malformed pair line '" + line + "'");
    out.push_back({detail::trim(line.substr(0, comma)), detail::trim(line.substr(comma + 1))});
  }
  return out;
}

// Exclusion lists resolved against a schema.
class ExclusionIndex {
 public:
  ExclusionIndex(const AttributeSchema& schema, const std::vector<std::string>& objects,
                 const std::vector<ExcludedPair>& pairs) {
    for (const auto& name : objects) {
      auto v = schema.find_value(attr::kObjectName, name);
      if (!v) throw ValidationError("excluded object '" + name + "' is not in the schema");
      objects_.insert(static_cast<int>(*v));
    }
    for (const auto& p : pairs) {
      auto a = parse_action(p.action);
      if (!a) throw ValidationError("excluded pair has unknown action '" + p.action + "'");
      auto v = schema.find_value(attr::kObjectName, p.object);
      if (!v) throw ValidationError("excluded pair object '" + p.object + "' is not in the schema");
      pairs_.insert({*a, static_cast<int>(*v)});
    }
  }

  bool empty() const { return objects_.empty() && pairs_.empty(); }

  // True when any object slot or the action's object/receptacle is an excluded
  // object, or the (action, action object or receptacle) pair is excluded.
  bool mentions(const TrajectoryRecord& r) const {
    for (const auto& o : r.objects_pre) {
      if (!o.is_none && !o.values.empty() && objects_.count(o.values[attr::kObjectName])) return true;
    }
    const auto& a = r.action;
    if (objects_.count(a.object_name) || objects_.count(a.receptacle_name)) return true;
    return pairs_.count({a.action_id, a.object_name}) || pairs_.count({a.action_id, a.receptacle_name});
  }

 private:
  std::set<int> objects_;
  std::set<std::pair<int, int>> pairs_;
};

// Zero-shot routing happens before the shuffle, so excluded content can never
// reach train or val.
inline SplitManifest build_zero_shot_split(const std::vector<TrajectoryRecord>& records,
                                           const AttributeSchema& schema,
                                           const std::vector<std::string>& excluded_objects,
                                           const std::vector<ExcludedPair>& excluded_pairs, SplitSizes sizes,
                                           std::uint64_t seed) {
  ExclusionIndex index(schema, excluded_objects, excluded_pairs);
  SplitManifest m;
  m.seed = seed;
  m.excluded_objects = excluded_objects;
  m.excluded_pairs = excluded_pairs;

  std::unordered_set<std::string> seen;
  std::vector<const TrajectoryRecord*> remaining;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) throw ValidationError("duplicate record id " + r.id);
    if (index.mentions(r)) {
      m.zero_shot_test_ids.push_back(r.id);
    } else {
      remaining.push_back(&r);
    }
  }
  const std::size_t requested = sizes.train + sizes.val + sizes.test;
  if (requested > remaining.size()) {
    throw ValidationError("requested split sizes (" + std::to_string(requested) + ") exceed the " +
                          std::to_string(remaining.size()) + " records available after exclusion");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(remaining.begin(), remaining.end(), rng);
  std::size_t i = 0;
  for (; i < sizes.train; ++i) m.train_ids.push_back(remaining[i]->id);
  for (; i < sizes.train + sizes.val; ++i) m.val_ids.push_back(remaining[i]->id);
  for (; i < requested; ++i) m.test_ids.push_back(remaining[i]->id);
  m.test_ids.insert(m.test_ids.end(), m.zero_shot_test_ids.begin(), m.zero_shot_test_ids.end());
  return m;
}

// Exhaustive check of the manifest invariants; returns the violations found.
inline std::vector<std::string> audit_manifest(const SplitManifest& m, const std::vector<TrajectoryRecord>& records,
                                               const AttributeSchema& schema) {
  std::vector<std::string> problems;
  ExclusionIndex index(schema, m.excluded_objects, m.excluded_pairs);
  std::unordered_map<std::string, const TrajectoryRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;

  std::unordered_map<std::string, std::string> owner;
  auto claim = [&](const std::vector<std::string>& ids, const std::string& split) {
    for (const auto& id : ids) {
      auto [it, inserted] = owner.emplace(id, split);
      if (!inserted) problems.push_back(id + " appears in both " + it->second + " and " + split);
    }
  };
  claim(m.train_ids, "train");
  claim(m.val_ids, "val");
  claim(m.test_ids, "test");

  auto check_clean = [&](const std::vector<std::string>& ids, const std::string& split) {
    for (const auto& id : ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) {
        problems.push_back(split + " id " + id + " has no record");
      } else if (index.mentions(*it->second)) {
        problems.push_back(split + " record " + id + " mentions an exclusion");
      }
    }
  };
  check_clean(m.train_ids, "train");
  check_clean(m.val_ids, "val");

  std::unordered_set<std::string> test(m.test_ids.begin(), m.test_ids.end());
  for (const auto& id : m.zero_shot_test_ids) {
    if (!test.count(id)) problems.push_back("zero-shot id " + id + " is not in test");
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      problems.push_back("zero-shot id " + id + " has no record");
    } else if (!index.mentions(*it->second)) {
      problems.push_back("zero-shot record " + id + " mentions no exclusion");
    }
  }
  return problems;
}

// Records whose ids are listed, in list order.
inline std::vector<TrajectoryRecord> select_records(const std::vector<TrajectoryRecord>& records,
                                                    const std::vector<std::string>& ids) {
  std::unordered_map<std::string, const TrajectoryRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  std::vector<TrajectoryRecord> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("manifest id " + id + " has no record");
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace physdyn
