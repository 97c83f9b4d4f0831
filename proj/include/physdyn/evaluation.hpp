#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "physdyn/adapters.hpp"
#include "physdyn/errors.hpp"
#include "physdyn/feature_cache.hpp"
#include "physdyn/image.hpp"
#include "physdyn/model.hpp"
#include "physdyn/schema.hpp"

namespace physdyn {

// Post-state predictions for scored objects only (None objects dropped).
struct PredictionSet {
  int slots = 0;
  std::vector<int> predictions;  // objects x slots local value indices
  std::vector<int> targets;
  std::vector<int> actions;  // trajectory action per object
  std::vector<std::string> record_ids;  // owning trajectory per object

  std::size_t objects() const { return actions.size(); }

  void validate() const {
    if (slots < 1) throw ValidationError("prediction set needs a positive slot count");
    const std::size_t n = objects();
    if (predictions.size() != n * static_cast<std::size_t>(slots) || targets.size() != predictions.size()) {
      throw ValidationError("predictions (" + std::to_string(predictions.size()) + ") and targets (" +
                            std::to_string(targets.size()) + ") do not match " + std::to_string(n) + " objects x " +
                            std::to_string(slots) + " slots");
    }
    if (!record_ids.empty() && record_ids.size() != n) {
      throw ValidationError("record_ids must have one entry per object");
    }
  }

  bool object_correct(std::size_t m) const {
    const auto s = static_cast<std::size_t>(slots);
    return std::equal(predictions.begin() + static_cast<std::ptrdiff_t>(m * s),
                      predictions.begin() + static_cast<std::ptrdiff_t>((m + 1) * s),
                      targets.begin() + static_cast<std::ptrdiff_t>(m * s));
  }
};

inline double percent(std::size_t hits, std::size_t total) {
  return 100.0 * static_cast<double>(hits) / static_cast<double>(total);
}

inline double exact_match_accuracy(const PredictionSet& p) {
  p.validate();
  if (p.objects() == 0) throw ValidationError("no scored objects");
  std::size_t hits = 0;
  for (std::size_t m = 0; m < p.objects(); ++m) hits += p.object_correct(m);
  return percent(hits, p.objects());
}

enum class GroupBy { kAction, kAttribute };

inline GroupBy parse_group_by(const std::string& s) {
  if (s == "action") return GroupBy::kAction;
  if (s == "attribute") return GroupBy::kAttribute;
  throw ValidationError("unknown group key '" + s + "' (expected action or attribute)");
}

// Action grouping: exact match over objects of each action's trajectories.
// Attribute grouping: per-attribute value accuracy over all scored objects.
// Keys are action names or schema attribute names (attr<i> without a schema).
inline std::map<std::string, double> grouped_accuracy(const PredictionSet& p, GroupBy by,
                                                      const AttributeSchema* schema = nullptr) {
  p.validate();
  if (p.objects() == 0) throw ValidationError("no scored objects");
  std::map<std::string, double> out;
  const auto s = static_cast<std::size_t>(p.slots);
  if (by == GroupBy::kAction) {
    std::map<int, std::pair<std::size_t, std::size_t>> counts;
    for (std::size_t m = 0; m < p.objects(); ++m) {
      auto& c = counts[p.actions[m]];
      c.first += p.object_correct(m);
      ++c.second;
    }
    for (const auto& [a, c] : counts) out[std::string(action_name(a))] = percent(c.first, c.second);
    return out;
  }
  if (schema && schema->size() != s) throw ValidationError("schema slot count differs from predictions");
  for (std::size_t i = 0; i < s; ++i) {
    std::size_t hits = 0;
    for (std::size_t m = 0; m < p.objects(); ++m) hits += p.predictions[m * s + i] == p.targets[m * s + i];
    out[schema ? schema->attribute(i).name : "attr" + std::to_string(i)] = percent(hits, p.objects());
  }
  return out;
}

// Subset of objects whose record id is (or is not) in `ids`.
inline PredictionSet restrict_to(const PredictionSet& p, const std::unordered_set<std::string>& ids,
                                 bool inside = true) {
  p.validate();
  if (p.record_ids.size() != p.objects()) throw ValidationError("prediction set carries no record ids");
  PredictionSet out;
  out.slots = p.slots;
  const auto s = static_cast<std::size_t>(p.slots);
  for (std::size_t m = 0; m < p.objects(); ++m) {
    if ((ids.count(p.record_ids[m]) > 0) != inside) continue;
    const auto b = static_cast<std::ptrdiff_t>(m * s), e = static_cast<std::ptrdiff_t>((m + 1) * s);
    out.predictions.insert(out.predictions.end(), p.predictions.begin() + b, p.predictions.begin() + e);
    out.targets.insert(out.targets.end(), p.targets.begin() + b, p.targets.begin() + e);
    out.actions.push_back(p.actions[m]);
    out.record_ids.push_back(p.record_ids[m]);
  }
  return out;
}

inline double zero_shot_accuracy(const PredictionSet& p, const std::unordered_set<std::string>& zero_shot_ids) {
  if (zero_shot_ids.empty()) throw ValidationError("zero-shot set is empty");
  auto sub = restrict_to(p, zero_shot_ids);
  if (sub.objects() == 0) throw ValidationError("no scored objects belong to the zero-shot set");
  return exact_match_accuracy(sub);
}

// Runs the model over records in order and keeps non-None post predictions.
template <class T>
PredictionSet collect_predictions(DynamicsModel<T>& model, const std::vector<const TrajectoryRecord*>& records,
                                  const AttributeSchema* schema, const FeatureStore* features,
                                  int batch_size = 256) {
  PredictionSet out;
  out.slots = model.config().n_slots();
  const auto S = static_cast<std::size_t>(out.slots);
  const auto ranges = model.config().ranges();
  for (std::size_t i = 0; i < records.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(records.size(), i + static_cast<std::size_t>(batch_size));
    std::vector<const TrajectoryRecord*> chunk(records.begin() + static_cast<std::ptrdiff_t>(i),
                                               records.begin() + static_cast<std::ptrdiff_t>(end));
    auto batch = make_batch<T>(chunk, model.config(), schema, features);
    const auto pred = model.predict(batch);
    const auto& tg = batch.targets();
    for (int m = 0; m < pred.objects; ++m) {
      if (tg.weight[static_cast<std::size_t>(m)] == T(0)) continue;
      for (std::size_t k = 0; k < S; ++k) {
        const std::size_t r = static_cast<std::size_t>(m) * S + k;
        out.predictions.push_back(pred.post[r]);
        out.targets.push_back(tg.post[r] - ranges[k].offset);
      }
      out.actions.push_back(tg.action[static_cast<std::size_t>(m)]);
      out.record_ids.push_back(chunk[static_cast<std::size_t>(m / 2)]->id);
    }
  }
  return out;
}

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

struct EvalReport {
  std::string setup;
  std::uint64_t seed = 0;
  double overall_accuracy = 0;
  std::optional<double> zero_shot_accuracy;
  std::map<std::string, double> per_action_accuracy;
  std::map<std::string, double> per_attribute_accuracy;
  std::size_t n_objects_scored = 0;
  std::size_t n_zero_shot_objects = 0;

  // Percentages rounded to two decimals; keys sorted, so output is canonical.
  json to_json() const {
    json j;
    j["setup"] = setup;
    j["seed"] = seed;
    j["overall_accuracy"] = round2(overall_accuracy);
    j["zero_shot_accuracy"] = zero_shot_accuracy ? json(round2(*zero_shot_accuracy)) : json(nullptr);
    json pa = json::object(), pt = json::object();
    for (const auto& [k, v] : per_action_accuracy) pa[k] = round2(v);
    for (const auto& [k, v] : per_attribute_accuracy) pt[k] = round2(v);
    j["per_action_accuracy"] = pa;
    j["per_attribute_accuracy"] = pt;
    j["n_objects_scored"] = n_objects_scored;
    j["n_zero_shot_objects"] = n_zero_shot_objects;
    j["action_attribution"] = "each object is attributed to its trajectory's action and scored separately";
    return j;
  }

  static EvalReport from_json(const json& j) {
    EvalReport r;
    try {
      r.setup = j.value("setup", "");
      r.seed = j.value("seed", std::uint64_t{0});
      r.overall_accuracy = j.at("overall_accuracy").get<double>();
      if (j.contains("zero_shot_accuracy") && !j["zero_shot_accuracy"].is_null()) {
        r.zero_shot_accuracy = j["zero_shot_accuracy"].get<double>();
      }
      r.per_action_accuracy = j.value("per_action_accuracy", std::map<std::string, double>{});
      r.per_attribute_accuracy = j.value("per_attribute_accuracy", std::map<std::string, double>{});
      r.n_objects_scored = j.value("n_objects_scored", std::size_t{0});
      r.n_zero_shot_objects = j.value("n_zero_shot_objects", std::size_t{0});
    } catch (const json::exception& e) {
      throw ValidationError(std::string("malformed evaluation report: ") + e.what());
    }
    return r;
  }

  // Flat metric name -> value view used for aggregation.
  std::map<std::string, double> metrics() const {
    std::map<std::string, double> m;
    m["overall"] = overall_accuracy;
    if (zero_shot_accuracy) m["zero_shot"] = *zero_shot_accuracy;
    for (const auto& [k, v] : per_action_accuracy) m["action/" + k] = v;
    for (const auto& [k, v] : per_attribute_accuracy) m["attribute/" + k] = v;
    return m;
  }
};

inline EvalReport make_report(const PredictionSet& p, const std::unordered_set<std::string>& zero_shot_ids,
                              const AttributeSchema* schema, std::string setup, std::uint64_t seed) {
  EvalReport r;
  r.setup = std::move(setup);
  r.seed = seed;
  r.overall_accuracy = exact_match_accuracy(p);
  r.per_action_accuracy = grouped_accuracy(p, GroupBy::kAction);
  r.per_attribute_accuracy = grouped_accuracy(p, GroupBy::kAttribute, schema);
  r.n_objects_scored = p.objects();
  if (!zero_shot_ids.empty()) {
    auto zs = restrict_to(p, zero_shot_ids);
    r.n_zero_shot_objects = zs.objects();
    if (zs.objects() > 0) r.zero_shot_accuracy = exact_match_accuracy(zs);
  }
  return r;
}

template <class T>
EvalReport evaluate_model(DynamicsModel<T>& model, const std::vector<const TrajectoryRecord*>& records,
                          const AttributeSchema& schema, const FeatureStore* features,
                          const std::unordered_set<std::string>& zero_shot_ids, std::uint64_t seed,
                          int batch_size = 256) {
  auto p = collect_predictions(model, records, &schema, features, batch_size);
  return make_report(p, zero_shot_ids, &schema, setup_name(model.config().setup()), seed);
}

// ---------------------------------------------------------------------------
// Aggregation across seeds

struct MetricSummary {
  double mean = 0;
  double sd = 0;  // sample standard deviation; 0 when n == 1
  std::size_t n = 0;
};

struct AggregateReport {
  std::string setup;
  std::map<std::string, MetricSummary> metrics;
  std::size_t runs = 0;
  bool single_run = false;  // sd reported as 0 by convention

  const MetricSummary& at(const std::string& metric) const {
    auto it = metrics.find(metric);
    if (it == metrics.end()) throw ValidationError("no aggregated metric '" + metric + "'");
    return it->second;
  }

  json to_json() const {
    json j;
    j["setup"] = setup;
    j["runs"] = runs;
    j["single_run"] = single_run;
    json m = json::object();
    for (const auto& [k, s] : metrics) m[k] = {{"mean", round2(s.mean)}, {"sd", round2(s.sd)}, {"n", s.n}};
    j["metrics"] = m;
    return j;
  }
};

inline MetricSummary summarize(const std::vector<double>& xs) {
  if (xs.empty()) throw ValidationError("cannot summarize an empty sample");
  MetricSummary s;
  s.n = xs.size();
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

inline AggregateReport aggregate_runs(const std::vector<EvalReport>& reports) {
  if (reports.empty()) throw ValidationError("aggregate_runs needs at least one report");
  AggregateReport out;
  out.setup = reports.front().setup;
  out.runs = reports.size();
  out.single_run = reports.size() == 1;
  const auto first = reports.front().metrics();
  std::map<std::string, std::vector<double>> values;
  for (const auto& r : reports) {
    const auto m = r.metrics();
    if (m.size() != first.size() ||
        !std::equal(m.begin(), m.end(), first.begin(), [](const auto& a, const auto& b) { return a.first == b.first; })) {
      throw ValidationError("reports have inconsistent metric keys (seed " + std::to_string(r.seed) + ")");
    }
    for (const auto& [k, v] : m) values[k].push_back(v);
  }
  for (auto& [k, xs] : values) {
    std::sort(xs.begin(), xs.end());  // summation order independent of report order
    out.metrics[k] = summarize(xs);
  }
  return out;
}

// One row per aggregate, one "mean ± sd" cell per requested metric.
inline std::string format_table(const std::vector<AggregateReport>& rows, const std::vector<std::string>& columns,
                                const std::vector<std::string>& headers = {}) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head = {"setup"};
  for (std::size_t i = 0; i < columns.size(); ++i) head.push_back(i < headers.size() ? headers[i] : columns[i]);
  cells.push_back(head);
  for (const auto& r : rows) {
    std::vector<std::string> line = {r.setup};
    for (const auto& c : columns) {
      auto it = r.metrics.find(c);
      if (it == r.metrics.end()) {
        line.push_back("-");
        continue;
      }
      std::ostringstream s;
      s << std::fixed << std::setprecision(2) << it->second.mean << " ± " << it->second.sd;
      line.push_back(s.str());
    }
    cells.push_back(line);
  }
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;  // count UTF-8 code points
    return w;
  };
  std::vector<std::size_t> widths(head.size(), 0);
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], width(row[i]));
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const auto pad = widths[i] - width(cells[r][i]);
      if (i == 0) {
        out << cells[r][i] << std::string(pad, ' ');
      } else {
        out << "  " << std::string(pad, ' ') << cells[r][i];
      }
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : widths) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  return out.str();
}

inline std::string format_csv(const std::vector<AggregateReport>& rows, const std::vector<std::string>& columns) {
  std::ostringstream out;
  out << "setup,runs";
  for (const auto& c : columns) out << ',' << c << "_mean," << c << "_sd";
  out << '\n' << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    out << r.setup << ',' << r.runs;
    for (const auto& c : columns) {
      auto it = r.metrics.find(c);
      if (it == r.metrics.end()) {
        out << ",,";
      } else {
        out << ',' << it->second.mean << ',' << it->second.sd;
      }
    }
    out << '\n';
  }
  return out.str();
}

// Metric columns present in every row, overall and zero-shot first.
inline std::vector<std::string> common_columns(const std::vector<AggregateReport>& rows, const std::string& prefix) {
  std::vector<std::string> cols;
  if (rows.empty()) return cols;
  for (const auto& [k, s] : rows.front().metrics) {
    if (k.rfind(prefix, 0) != 0) continue;
    bool everywhere = true;
    for (const auto& r : rows) everywhere &= r.metrics.count(k) > 0;
    if (everywhere) cols.push_back(k);
  }
  return cols;
}

// ---------------------------------------------------------------------------
// Attention maps

inline constexpr Rgb kAttentionColor{255, 0, 0};

// Blends every box toward the highlight color in proportion to its weight and
// outlines it; the weights must sum to 1.
inline Image render_attention_panel(const Image& image, const std::vector<Rect>& boxes,
                                    const std::vector<double>& alpha) {
  if (boxes.size() != alpha.size()) throw ValidationError("one attention weight per box is required");
  double sum = 0;
  for (double a : alpha) {
    if (!(a >= 0.0 && a <= 1.0 + 1e-9)) throw ValidationError("attention weight outside [0, 1]");
    sum += a;
  }
  if (std::abs(sum - 1.0) > 1e-5) throw ValidationError("attention weights sum to " + std::to_string(sum));
  Image out = image;
  for (auto& v : out.rgb) v = static_cast<std::uint8_t>(v / 2 + 64);  // dim the background
  const std::uint8_t hc[3] = {kAttentionColor.r, kAttentionColor.g, kAttentionColor.b};
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const Rect& r = boxes[b];
    if (r.w <= 0 || r.h <= 0) continue;
    const double a = alpha[b];
    for (int y = std::max(0, r.y); y < std::min(out.height, r.y + r.h); ++y) {
      for (int x = std::max(0, r.x); x < std::min(out.width, r.x + r.w); ++x) {
        const std::size_t i = (static_cast<std::size_t>(y) * static_cast<std::size_t>(out.width) +
                               static_cast<std::size_t>(x)) * 3;
        const bool edge = x == r.x || y == r.y || x == r.x + r.w - 1 || y == r.y + r.h - 1;
        for (int c = 0; c < 3; ++c) {
          const double src = image.rgb[i + static_cast<std::size_t>(c)];
          out.rgb[i + static_cast<std::size_t>(c)] =
              edge ? hc[c] : static_cast<std::uint8_t>(std::lround((1.0 - a) * src + a * hc[c]));
        }
      }
    }
  }
  return out;
}

// Panels in row-major order, separated by a 2-pixel white gutter.
inline Image tile_panels(const std::vector<Image>& panels, int cols) {
  if (panels.empty() || cols < 1) throw ValidationError("nothing to tile");
  const int w = panels.front().width, h = panels.front().height, gap = 2;
  const int n = static_cast<int>(panels.size());
  const int rows = (n + cols - 1) / cols;
  Image out(cols * w + (cols - 1) * gap, rows * h + (rows - 1) * gap);
  fill_rect(out, {0, 0, out.width, out.height}, {255, 255, 255});
  for (int p = 0; p < n; ++p) {
    const auto& img = panels[static_cast<std::size_t>(p)];
    if (img.width != w || img.height != h) throw ValidationError("panels differ in size");
    const int ox = (p % cols) * (w + gap), oy = (p / cols) * (h + gap);
    for (int y = 0; y < h; ++y) {
      std::copy_n(img.rgb.begin() + static_cast<std::ptrdiff_t>(y) * w * 3, w * 3,
                  out.rgb.begin() + (static_cast<std::ptrdiff_t>(oy + y) * out.width + ox) * 3);
    }
  }
  return out;
}

struct AttentionMaps {
  // [object][0 = pre, 1 = post] weights over the detector's boxes.
  std::array<std::array<std::vector<double>, 2>, 2> alpha;
  std::array<std::array<std::vector<Rect>, 2>, 2> boxes;
  std::vector<std::string> files;
};

// Writes <prefix>_obj{0,1}_{pre,post}.png and the 2 x 2 grid <prefix>_grid.png
// (rows: objects; columns: pre, post).
template <class T>
AttentionMaps export_attention_maps(DynamicsModel<T>& model, const TrajectoryRecord& record, const ImagePair& images,
                                    const BoxFeatureAdapter& adapter, const AttributeSchema& schema,
                                    const FeatureStore& text_features, const std::string& out_dir,
                                    const std::string& prefix = "attn") {
  if (!model.config().use_images) throw ValidationError("attention maps need a model with the vision branch");
  const auto det_pre = adapter.detect(images.pre);
  const auto det_post = adapter.detect(images.post);
  FeatureStore fs = text_features;
  fs.add_boxes(record.image_pre, det_pre.features);
  fs.add_boxes(record.image_post, det_post.features);
  auto batch = make_batch<T>({&record}, model.config(), &schema, &fs);
  const auto pred = model.predict(batch);
  AttentionMaps maps;
  std::filesystem::create_directories(out_dir);
  std::vector<Image> panels;
  for (int o = 0; o < 2; ++o) {
    for (int t = 0; t < 2; ++t) {
      const auto& A = t == 0 ? pred.alpha_pre : pred.alpha_post;
      auto& a = maps.alpha[static_cast<std::size_t>(o)][static_cast<std::size_t>(t)];
      a.assign(A.row(o).data(), A.row(o).data() + A.cols());
      maps.boxes[static_cast<std::size_t>(o)][static_cast<std::size_t>(t)] = t == 0 ? det_pre.boxes : det_post.boxes;
      panels.push_back(render_attention_panel(t == 0 ? images.pre : images.post,
                                              t == 0 ? det_pre.boxes : det_post.boxes, a));
      const auto path = (std::filesystem::path(out_dir) /
                         (prefix + "_obj" + std::to_string(o) + (t == 0 ? "_pre" : "_post") + ".png"))
                            .string();
      write_png(path, panels.back());
      maps.files.push_back(path);
    }
  }
  const auto grid = (std::filesystem::path(out_dir) / (prefix + "_grid.png")).string();
  write_png(grid, tile_panels(panels, 2));
  maps.files.push_back(grid);
  return maps;
}

}  // namespace physdyn
