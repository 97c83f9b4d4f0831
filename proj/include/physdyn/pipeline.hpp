#pragma once

#include <chrono>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "physdyn/adapters.hpp"
#include "physdyn/evaluation.hpp"
#include "physdyn/feature_cache.hpp"
#include "physdyn/model.hpp"
#include "physdyn/pixel_stats.hpp"
#include "physdyn/split.hpp"
#include "physdyn/synthetic_world.hpp"
#include "physdyn/training.hpp"

namespace physdyn {

// Every size and hyperparameter of one end-to-end run.
struct Profile {
  std::string name = "paper";
  // Model.
  int hidden_size = 64;
  int feedforward_size = 2048;
  double dropout = 0.1;
  int n_boxes = 10;
  int box_dim = 64;
  int text_dim = 64;
  // Optimization.
  int batch_size = 256;
  int pretrain_epochs = 80;
  int finetune_epochs = 60;
  double pretrain_lr = 1e-3;
  double finetune_lr = 1e-5;
  int patience = 10;
  // Synthetic data (desk only).
  std::size_t pretrain_pool = 0;
  std::size_t finetune_pool = 0;
  std::size_t finetune_train = 750;
  std::size_t finetune_val = 367;
  std::size_t finetune_test = 398;
  double pretrain_val_fraction = 26823.0 / (232625.0 + 26823.0);
  std::vector<std::string> excluded_objects;
  std::vector<ExcludedPair> excluded_pairs;

  static Profile paper() { return Profile{}; }

  static Profile desk() {
    Profile p;
    p.name = "desk";
    p.hidden_size = 32;
    p.feedforward_size = 64;
    p.n_boxes = 6;
    p.batch_size = 32;
    p.pretrain_epochs = 10;
    p.finetune_epochs = 20;
    p.finetune_lr = 1e-3;
    p.pretrain_pool = 6400;
    p.finetune_pool = 900;
    p.finetune_train = 300;
    p.finetune_val = 100;
    p.finetune_test = 200;
    p.pretrain_val_fraction = 0.1;
    p.excluded_objects = {"Towel", "SoapBar"};
    p.excluded_pairs = {{"PickupObject", "CellPhone"}, {"PutObject", "Pot"}, {"ToggleObjectOff", "Television"}};
    return p;
  }

  static Profile by_name(const std::string& n) {
    if (n == "paper") return paper();
    if (n == "desk") return desk();
    throw ValidationError("unknown profile '" + n + "' (expected paper or desk)");
  }

  ModelConfig model_config(Setup s, const AttributeSchema& schema) const {
    auto c = ModelConfig::for_setup(s, ModelConfig::sizes_of(schema));
    c.hidden_size = hidden_size;
    c.feedforward_size = feedforward_size;
    c.dropout = dropout;
    if (c.use_images) {
      c.n_boxes = n_boxes;
      c.box_dim = box_dim;
    }
    if (c.use_text_labels) c.text_embed_dim = text_dim;
    return c;
  }

  TrainConfig train_config(Phase phase, std::uint64_t seed) const {
    TrainConfig t = TrainConfig::paper(phase);
    t.epochs = phase == Phase::kPretrain ? pretrain_epochs : finetune_epochs;
    t.learning_rate = phase == Phase::kPretrain ? pretrain_lr : finetune_lr;
    t.batch_size = batch_size;
    t.patience = patience;
    t.seed = seed;
    return t;
  }
};

// Filtered, split and featurized synthetic data for every setup.
struct DeskData {
  AttributeSchema schema;
  std::vector<TrajectoryRecord> pretrain_train, pretrain_val;
  std::vector<TrajectoryRecord> finetune_train, finetune_val, finetune_test;
  std::unordered_set<std::string> zero_shot_ids;
  SplitManifest pretrain_manifest, finetune_manifest;
  FilterReport pretrain_filter, finetune_filter;
  FeatureStore features;
  // Images and generator layouts by record id, for attention-map checks.
  std::unordered_map<std::string, ImagePair> images;
  std::unordered_map<std::string, SceneLayout> layouts;
};

inline std::vector<const TrajectoryRecord*> pointers(const std::vector<TrajectoryRecord>& rs) {
  std::vector<const TrajectoryRecord*> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(&r);
  return out;
}

// Texts the label-text setup looks up: every object name and action label.
inline std::vector<std::string> label_texts(const AttributeSchema& schema, int n_actions) {
  std::vector<std::string> out;
  for (std::size_t v = 0; v < schema.vocabulary_size(attr::kObjectName); ++v) {
    out.push_back(object_label_text(schema, static_cast<int>(v)));
  }
  for (int a = 0; a < n_actions; ++a) out.push_back(action_label_text(a));
  return out;
}

// Two independent synthetic worlds: a symbolic pre-training pool and a
// sentence-annotated fine-tuning pool. Both pass the visual filters; every
// record touching an exclusion is kept out of training and validation, and
// only the fine-tuning test split receives them.
inline DeskData build_desk_data(const Profile& profile, std::uint64_t seed, bool keep_images = false) {
  DeskData d;
  SyntheticWorldConfig wc;
  wc.n_trajectories = profile.pretrain_pool;
  wc.id_prefix = "p";
  auto pre_world = generate_synthetic_world(wc, seed);
  wc.n_trajectories = profile.finetune_pool;
  wc.id_prefix = "f";
  wc.with_text = true;
  auto ft_world = generate_synthetic_world(wc, seed + 1);
  d.schema = pre_world.schema;

  const auto thresholds = FilterThresholds::scaled_to(wc.image_width, wc.image_height);
  auto filter = [&](const SyntheticWorld& w, FilterReport& report) {
    std::unordered_map<std::string, const ImagePair*> by_id;
    for (std::size_t i = 0; i < w.records.size(); ++i) by_id[w.records[i].id] = &w.images[i];
    auto result = apply_visual_filters(
        w.records,
        [&](const TrajectoryRecord& r) -> std::optional<ImagePair> {
          auto it = by_id.find(r.id);
          if (it == by_id.end()) return std::nullopt;
          return *it->second;
        },
        thresholds);
    report = result.report;
    report.pairs.clear();
    return std::move(result.kept);
  };
  auto pre_kept = filter(pre_world, d.pretrain_filter);
  auto ft_kept = filter(ft_world, d.finetune_filter);

  ExclusionIndex index(d.schema, profile.excluded_objects, profile.excluded_pairs);
  std::size_t clean = 0;
  for (const auto& r : pre_kept) clean += !index.mentions(r);
  SplitSizes ps;
  ps.val = static_cast<std::size_t>(std::llround(profile.pretrain_val_fraction * static_cast<double>(clean)));
  ps.train = clean - ps.val;
  d.pretrain_manifest =
      build_zero_shot_split(pre_kept, d.schema, profile.excluded_objects, profile.excluded_pairs, ps, seed);
  d.pretrain_train = select_records(pre_kept, d.pretrain_manifest.train_ids);
  d.pretrain_val = select_records(pre_kept, d.pretrain_manifest.val_ids);

  SplitSizes fs{profile.finetune_train, profile.finetune_val, profile.finetune_test};
  d.finetune_manifest =
      build_zero_shot_split(ft_kept, d.schema, profile.excluded_objects, profile.excluded_pairs, fs, seed + 1);
  d.finetune_train = select_records(ft_kept, d.finetune_manifest.train_ids);
  d.finetune_val = select_records(ft_kept, d.finetune_manifest.val_ids);
  d.finetune_test = select_records(ft_kept, d.finetune_manifest.test_ids);
  d.zero_shot_ids.insert(d.finetune_manifest.zero_shot_test_ids.begin(), d.finetune_manifest.zero_shot_test_ids.end());

  StubBoxDetector detector(profile.n_boxes, profile.box_dim);
  HashTextEncoder text(profile.text_dim);
  std::unordered_set<std::string> used;
  for (const auto* set : {&d.pretrain_train, &d.pretrain_val, &d.finetune_train, &d.finetune_val, &d.finetune_test}) {
    for (const auto& r : *set) used.insert(r.id);
  }
  for (const auto* w : {&pre_world, &ft_world}) {
    for (std::size_t i = 0; i < w->records.size(); ++i) {
      const auto& r = w->records[i];
      if (!used.count(r.id)) continue;
      d.features.add_boxes(r.image_pre, detector.detect(w->images[i].pre).features);
      d.features.add_boxes(r.image_post, detector.detect(w->images[i].post).features);
      if (r.action.text && !d.features.contains_text(*r.action.text)) {
        d.features.add_text(*r.action.text, text.embed(*r.action.text));
      }
      if (keep_images) {
        d.images[r.id] = w->images[i];
        d.layouts[r.id] = w->layouts[i];
      }
    }
  }
  for (const auto& t : label_texts(d.schema, kNumActions)) {
    if (!d.features.contains_text(t)) d.features.add_text(t, text.embed(t));
  }
  return d;
}

struct SetupRun {
  Setup setup = Setup::kBase;
  std::uint64_t seed = 0;
  std::vector<EpochRecord> pretrain_history, finetune_history;
  EvalReport report;
  double seconds = 0;
};

// Pre-trains, fine-tunes with action sentences, and scores the test split.
template <class T = float>
SetupRun run_setup(const DeskData& d, const Profile& profile, Setup setup, std::uint64_t seed,
                   DynamicsModel<T>* out_model = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  SetupRun run;
  run.setup = setup;
  run.seed = seed;
  const auto cfg = profile.model_config(setup, d.schema);
  auto pre = run_pretraining<T>(cfg, Dataset::of(d.pretrain_train, &d.schema, &d.features),
                                Dataset::of(d.pretrain_val, &d.schema, &d.features),
                                profile.train_config(Phase::kPretrain, seed));
  run.pretrain_history = pre.history;
  auto ft = run_finetuning<T>(pre.model, Dataset::of(d.finetune_train, &d.schema, &d.features),
                              Dataset::of(d.finetune_val, &d.schema, &d.features),
                              profile.train_config(Phase::kFinetune, seed));
  run.finetune_history = ft.history;
  run.report = evaluate_model(ft.model, pointers(d.finetune_test), d.schema, &d.features, d.zero_shot_ids, seed,
                              profile.batch_size);
  if (out_model) *out_model = ft.model;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

}  // namespace physdyn
