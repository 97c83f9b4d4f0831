#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "physdyn/adapters.hpp"
#include "physdyn/errors.hpp"
#include "physdyn/evaluation.hpp"
#include "physdyn/feature_cache.hpp"
#include "physdyn/image.hpp"
#include "physdyn/model.hpp"
#include "physdyn/pipeline.hpp"
#include "physdyn/pixel_stats.hpp"
#include "physdyn/schema.hpp"
#include "physdyn/split.hpp"
#include "physdyn/synthetic_world.hpp"
#include "physdyn/training.hpp"

namespace physdyn::cli {

namespace fs = std::filesystem;

inline constexpr const char* kDataEnv = "PHYSDYN_DATA_DIR";

// Layout of a dataset directory written by `synth`.
struct DataDir {
  fs::path root;
  fs::path schema() const { return root / "schema.json"; }
  fs::path records() const { return root / "records.jsonl"; }
  fs::path images() const { return root / "images"; }
  fs::path layouts() const { return root / "layouts.json"; }
  fs::path image(const std::string& ref) const { return images() / (ref + ".png"); }
};

inline json rect_json(const Rect& r) { return {r.x, r.y, r.w, r.h}; }

inline json layout_json(const std::string& id, const SceneLayout& l) {
  json entries = json::array();
  for (const auto& e : l.entries) {
    entries.push_back({{"name", e.name_value},
                       {"trajectory_slot", e.trajectory_slot},
                       {"rect_pre", rect_json(e.rect_pre)},
                       {"rect_post", rect_json(e.rect_post)}});
  }
  return {{"id", id}, {"lighting_changed", l.lighting_changed}, {"entries", entries}};
}

// Everything a training or evaluation command reads.
struct Inputs {
  AttributeSchema schema;
  std::vector<TrajectoryRecord> records;
  SplitManifest manifest;
  FeatureStore features;
  std::map<std::string, std::string> hashes;

  std::vector<TrajectoryRecord> subset(const std::vector<std::string>& ids) const {
    return select_records(records, ids);
  }
};

// One subcommand: its CLI11 app, the bound settings and its action.
struct Command {
  CLI::App* app = nullptr;
  std::function<int()> run;
  std::vector<std::string> output_options;  // excluded from replay metadata
};

class Dispatcher {
 public:
  Dispatcher(std::ostream& out, std::ostream& err) : out_(out), err_(err) { build(); }

  int dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
  }

  int dispatch(std::vector<std::string> args) {
    args_ = args;
    try {
      args = expand_config(args);
      std::vector<std::string> rev(args.rbegin(), args.rend());
      app_.parse(rev);
    } catch (const CLI::CallForHelp&) {
      out_ << help_for(args);
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out_ << app_.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      err_ << "error: " << e.what() << "\n\n" << help_for(args);
      return 1;
    } catch (const ValidationError& e) {
      err_ << "error: " << e.what() << "\n";
      return 1;
    } catch (const IoError& e) {
      err_ << "error: " << e.what() << "\n";
      return 2;
    }
    for (auto& [name, cmd] : commands_) {
      if (!cmd.app->parsed()) continue;
      try {
        apply_profile(cmd);
        return cmd.run();
      } catch (const ValidationError& e) {
        err_ << "error: " << e.what() << "\n";
        return 1;
      } catch (const IoError& e) {
        err_ << "error: " << e.what() << "\n";
        return 2;
      } catch (const fs::filesystem_error& e) {
        err_ << "error: " << e.what() << "\n";
        return 2;
      } catch (const json::exception& e) {
        err_ << "error: " << e.what() << "\n";
        return 1;
      }
    }
    err_ << app_.help();
    return 1;
  }

 private:
  // ---- settings -----------------------------------------------------------
  std::string profile_ = "paper";
  std::uint64_t seed_ = 1;
  std::string out_path_;
  std::string data_;
  std::string records_;
  std::string manifest_;
  std::string box_cache_;
  std::string text_cache_;
  std::string checkpoint_;

  // synth
  std::size_t trajectories_ = 1000;
  std::size_t object_types_ = 20;
  std::size_t objects_per_scene_ = 4;
  int width_ = 128, height_ = 96;
  double viewpoint_rate_ = 0.04;
  bool with_text_ = false;
  std::string prefix_ = "t";
  // filter
  std::int64_t max_changed_ = 400'000;
  double min_max_change_ = 0.2;
  bool scale_thresholds_ = false;
  std::string report_;
  // split
  std::string excluded_objects_, excluded_pairs_;
  std::size_t train_ = 0, val_ = 0, test_ = 0;
  double val_fraction_ = 0.1;
  // cache-features
  int n_boxes_ = 10, box_dim_ = 64, text_dim_ = 64;
  // model and training
  std::string setup_ = "base+symbolic";
  int hidden_ = 64, ffn_ = 2048, batch_ = 256, epochs_ = 80, patience_ = 10;
  double dropout_ = 0.1, lr_ = 1e-3;
  // eval / attn / report
  std::string split_ = "test";
  std::string record_id_;
  std::vector<std::string> runs_;
  std::string csv_, table_;

  CLI::App app_{"Action-effect dynamics model toolkit", "physdyn"};
  std::map<std::string, Command> commands_;
  std::vector<std::string> args_;
  std::ostream& out_;
  std::ostream& err_;

  static std::string paper_default(const std::string& what, const std::string& value) {
    return what + " (paper default: " + value + ")";
  }

  CLI::App* add_command(const std::string& name, const std::string& description) {
    auto* sub = app_.add_subcommand(name, description);
    sub->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    sub->add_option("--config", "JSON file of option values; explicit flags take precedence");
    sub->add_option("--seed", seed_, "Seed for all randomness of this command")->capture_default_str();
    return sub;
  }

  void add_data_options(CLI::App* sub, bool records = true) {
    sub->add_option("--data", data_, std::string("Dataset directory (env ") + kDataEnv + ")")
        ->envname(kDataEnv)
        ->required();
    if (records) sub->add_option("--records", records_, "Records file (default: <data>/records.jsonl)");
  }

  void add_cache_options(CLI::App* sub) {
    sub->add_option("--box-cache", box_cache_, "Box-feature cache written by cache-features");
    sub->add_option("--text-cache", text_cache_, "Text-embedding cache written by cache-features");
  }

  void add_train_options(CLI::App* sub, bool finetune) {
    sub->add_option("--profile", profile_, "Hyperparameter profile: paper or desk")
        ->check(CLI::IsMember({"paper", "desk"}))
        ->capture_default_str();
    sub->add_option("--epochs", epochs_, paper_default("Maximum epochs", finetune ? "60" : "80"));
    sub->add_option("--batch-size", batch_, paper_default("Mini-batch size", "256"));
    sub->add_option("--lr", lr_, paper_default("Adam learning rate", finetune ? "1e-5" : "1e-3"));
    sub->add_option("--patience", patience_, paper_default("Early-stopping patience in epochs", "10"));
    sub->add_option("--out", out_path_, "Run directory for checkpoint, history and metadata")->required();
  }

  void build() {
    app_.require_subcommand(1);
    app_.set_help_all_flag("--help-all", "Show help for every subcommand");

    {
      auto* sub = add_command("synth", "Generate a synthetic world: records, schema, images and layouts");
      sub->add_option("--out", out_path_, "Output dataset directory")->required();
      sub->add_option("--trajectories", trajectories_, "Number of trajectories")->capture_default_str();
      sub->add_option("--object-types", object_types_, "Object types drawn from the catalog")->capture_default_str();
      sub->add_option("--objects-per-scene", objects_per_scene_, "Objects rendered per scene")->capture_default_str();
      sub->add_option("--width", width_, "Image width")->capture_default_str();
      sub->add_option("--height", height_, "Image height")->capture_default_str();
      sub->add_option("--viewpoint-rate", viewpoint_rate_, "Probability of a global lighting change")
          ->capture_default_str();
      sub->add_flag("--with-text", with_text_, "Annotate actions with template sentences");
      sub->add_option("--prefix", prefix_, "Record id prefix")->capture_default_str();
      commands_["synth"] = {sub, [this] { return run_synth(); }, {"out"}};
    }
    {
      auto* sub = add_command("filter", "Apply the visual filters and write kept records plus a report");
      add_data_options(sub);
      sub->add_option("--max-changed", max_changed_,
                      paper_default("Reject pairs with more changed (x, y, channel) positions than this", "400000"));
      sub->add_option("--min-max-change", min_max_change_,
                      paper_default("Keep only pairs whose largest normalized change exceeds this", "0.2"));
      sub->add_flag("--scale-thresholds", scale_thresholds_,
                    "Scale --max-changed from a 640x385 raster to the dataset's image size");
      sub->add_option("--out", out_path_, "Kept records (default: <data>/filtered.jsonl)");
      sub->add_option("--report", report_, "Report JSON (default: <data>/filter_report.json)");
      commands_["filter"] = {sub, [this] { return run_filter(); }, {"out", "report"}};
    }
    {
      auto* sub = add_command("split", "Build a zero-shot split manifest");
      add_data_options(sub);
      sub->add_option("--excluded-objects", excluded_objects_, "File with one excluded object per line");
      sub->add_option("--excluded-pairs", excluded_pairs_, "File with one (action, object) pair per line");
      sub->add_option("--train", train_,
                      paper_default("Training records; 0 uses all remaining after validation",
                                    "232625 pre-training, 750 fine-tuning"));
      sub->add_option("--val", val_, paper_default("Validation records", "26823 pre-training, 367 fine-tuning"));
      sub->add_option("--test", test_, paper_default("In-distribution test records", "398 fine-tuning"));
      sub->add_option("--val-fraction", val_fraction_, "Validation share when --train and --val are 0")
          ->capture_default_str();
      sub->add_option("--out", out_path_, "Manifest JSON (default: <data>/manifest.json)");
      commands_["split"] = {sub, [this] { return run_split(); }, {"out"}};
    }
    {
      auto* sub = add_command("cache-features", "Run the frozen adapters and write feature caches");
      add_data_options(sub);
      sub->add_option("--n-boxes", n_boxes_, "Boxes kept per image by the detector adapter")->capture_default_str();
      sub->add_option("--box-dim", box_dim_, "Box feature dimension")->capture_default_str();
      sub->add_option("--text-dim", text_dim_, "Text embedding dimension")->capture_default_str();
      sub->add_option("--box-cache", box_cache_, "Box cache path (default: <data>/boxes.pvfc)");
      sub->add_option("--text-cache", text_cache_, "Text cache path (default: <data>/text.pvfc)");
      commands_["cache-features"] = {sub, [this] { return run_cache(); }, {"box-cache", "text-cache"}};
    }
    {
      auto* sub = add_command("pretrain", "Pre-train a dynamics model with symbolic actions");
      add_data_options(sub);
      sub->add_option("--manifest", manifest_, "Split manifest (train and val ids)")->required();
      add_cache_options(sub);
      sub->add_option("--setup", setup_, "base, base+symbolic, base+images, base+symbolic+images or "
                                         "base+images+text-labels")
          ->capture_default_str();
      sub->add_option("--hidden-size", hidden_, paper_default("Hidden size", "64"));
      sub->add_option("--ffn", ffn_, paper_default("Transformer feed-forward size", "2048"));
      sub->add_option("--dropout", dropout_, paper_default("Dropout", "0.1"));
      add_train_options(sub, false);
      commands_["pretrain"] = {sub, [this] { return run_train(false); }, {"out"}};
    }
    {
      auto* sub = add_command("finetune", "Swap in the text action encoder and fine-tune on annotated records");
      add_data_options(sub);
      sub->add_option("--manifest", manifest_, "Split manifest (train and val ids)")->required();
      sub->add_option("--checkpoint", checkpoint_, "Pre-trained checkpoint")->required();
      add_cache_options(sub);
      add_train_options(sub, true);
      commands_["finetune"] = {sub, [this] { return run_train(true); }, {"out"}};
    }
    {
      auto* sub = add_command("eval", "Score a checkpoint and write an evaluation report");
      add_data_options(sub);
      sub->add_option("--manifest", manifest_, "Split manifest")->required();
      sub->add_option("--checkpoint", checkpoint_, "Checkpoint to evaluate")->required();
      add_cache_options(sub);
      sub->add_option("--split", split_, "Split to score")->check(CLI::IsMember({"train", "val", "test"}))
          ->capture_default_str();
      sub->add_option("--out", out_path_, "Report JSON")->required();
      commands_["eval"] = {sub, [this] { return run_eval(); }, {"out"}};
    }
    {
      auto* sub = add_command("attn-maps", "Render vision-encoder attention over the detector boxes");
      add_data_options(sub, false);
      sub->add_option("--checkpoint", checkpoint_, "Checkpoint with the vision branch")->required();
      sub->add_option("--record", record_id_, "Record id to visualize")->required();
      sub->add_option("--records", records_, "Records file (default: <data>/records.jsonl)");
      sub->add_option("--text-cache", text_cache_, "Text cache (needed for text-label models)");
      sub->add_option("--out", out_path_, "Output directory for the PNG panels")->required();
      commands_["attn-maps"] = {sub, [this] { return run_attn(); }, {"out"}};
    }
    {
      auto* sub = add_command("report", "Aggregate evaluation reports over seeds");
      sub->add_option("--runs", runs_, "Report JSON files or directories containing report.json")
          ->required()
          ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
      sub->add_option("--csv", csv_, "Aggregate CSV output");
      sub->add_option("--table", table_, "Aligned text table output (printed when omitted)");
      commands_["report"] = {sub, [this] { return run_report(); }, {"csv", "table"}};
    }
  }

  std::string help_for(const std::vector<std::string>& args) const {
    for (const auto& a : args) {
      auto it = commands_.find(a);
      if (it != commands_.end()) return it->second.app->help();
    }
    return app_.help();
  }

  // Inserts `--key=value` arguments from the --config JSON before the
  // explicit ones, so explicit flags win under the take-last policy.
  std::vector<std::string> expand_config(const std::vector<std::string>& args) {
    if (args.empty()) return args;
    auto it = commands_.find(args.front());
    if (it == commands_.end()) return args;
    std::optional<std::string> path;
    for (std::size_t i = 1; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (!path) return args;
    const json cfg = read_json_file(*path);
    if (!cfg.is_object()) throw ValidationError(*path + ": config must be a JSON object");
    std::vector<std::string> injected;
    for (const auto& [key, value] : cfg.items()) {
      auto* opt = it->second.app->get_option_no_throw("--" + key);
      if (!opt || key == "config" || key == "help") throw ValidationError(*path + ": unknown config key '" + key + "'");
      auto scalar = [&](const json& v) -> std::string {
        if (v.is_string()) return v.get<std::string>();
        if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
        if (v.is_number()) return v.dump();
        throw ValidationError(*path + ": config key '" + key + "' must be a scalar or list of scalars");
      };
      if (value.is_array()) {
        for (const auto& v : value) injected.push_back("--" + key + "=" + scalar(v));
      } else {
        injected.push_back("--" + key + "=" + scalar(value));
      }
    }
    std::vector<std::string> out = {args.front()};
    out.insert(out.end(), injected.begin(), injected.end());
    out.insert(out.end(), args.begin() + 1, args.end());
    return out;
  }

  bool given(const Command& cmd, const std::string& name) const {
    auto* opt = cmd.app->get_option_no_throw("--" + name);
    return opt && opt->count() > 0;
  }

  // Desk values for hyperparameters the user did not set explicitly.
  void apply_profile(const Command& cmd) {
    if (!cmd.app->get_option_no_throw("--profile")) return;
    const Profile p = Profile::by_name(profile_);
    const bool ft = cmd.app->get_name() == "finetune";
    auto set = [&](const std::string& name, auto& field, auto value) {
      if (!given(cmd, name)) field = value;
    };
    set("epochs", epochs_, ft ? p.finetune_epochs : p.pretrain_epochs);
    set("lr", lr_, ft ? p.finetune_lr : p.pretrain_lr);
    set("batch-size", batch_, p.batch_size);
    set("patience", patience_, p.patience);
    if (!ft) {
      set("hidden-size", hidden_, p.hidden_size);
      set("ffn", ffn_, p.feedforward_size);
      set("dropout", dropout_, p.dropout);
    }
  }

  // Effective values of every option except outputs, for replay.
  json effective_config(const Command& cmd) const {
    json j = json::object();
    for (const auto* opt : cmd.app->get_options()) {
      const std::string name = opt->get_single_name();
      if (name.empty() || name == "help" || name == "config") continue;
      if (std::find(cmd.output_options.begin(), cmd.output_options.end(), name) != cmd.output_options.end()) continue;
      j[name] = opt->count() > 0 ? json(opt->as<std::string>()) : json(opt->get_default_str());
    }
    return j;
  }

  void write_metadata(const Command& cmd, const fs::path& path, json extra = json::object(),
                      const std::map<std::string, std::string>& hashes = {}) const {
    json j;
    j["command"] = cmd.app->get_name();
    j["config"] = effective_config(cmd);
    j["seed"] = seed_;
    json h = json::object();
    for (const auto& [k, v] : hashes) h[k] = v;
    j["input_hashes"] = h;
    for (auto& [k, v] : extra.items()) j[k] = v;
    write_json_file(path.string(), j);
  }

  DataDir data_dir() const { return DataDir{data_}; }

  std::string records_path() const { return records_.empty() ? data_dir().records().string() : records_; }

  // Input files are identified by name, not path, so reruns hash-compare.
  static void hash_into(std::map<std::string, std::string>& h, const std::string& path) {
    if (!path.empty()) h[fs::path(path).filename().string()] = file_sha1(path);
  }

  Inputs load_inputs(bool need_manifest) const {
    Inputs in;
    const DataDir d = data_dir();
    in.schema = read_schema(d.schema().string());
    in.records = read_records(records_path());
    hash_into(in.hashes, d.schema().string());
    hash_into(in.hashes, records_path());
    if (need_manifest) {
      in.manifest = SplitManifest::from_json(read_json_file(manifest_));
      hash_into(in.hashes, manifest_);
    }
    if (!box_cache_.empty()) {
      in.features.load_box_cache(box_cache_);
      hash_into(in.hashes, box_cache_);
    }
    if (!text_cache_.empty()) {
      in.features.load_text_cache(text_cache_);
      hash_into(in.hashes, text_cache_);
    }
    return in;
  }

  // ---- commands -----------------------------------------------------------

  int run_synth() {
    SyntheticWorldConfig wc;
    wc.n_trajectories = trajectories_;
    wc.n_object_types = object_types_;
    wc.n_objects = objects_per_scene_;
    wc.image_width = width_;
    wc.image_height = height_;
    wc.viewpoint_change_rate = viewpoint_rate_;
    wc.with_text = with_text_;
    wc.id_prefix = prefix_;
    auto world = generate_synthetic_world(wc, seed_);
    const DataDir d{out_path_};
    fs::create_directories(d.images());
    write_json_file(d.schema().string(), world.schema.to_json());
    write_records(d.records().string(), world.records);
    json layouts = json::array();
    for (std::size_t i = 0; i < world.records.size(); ++i) {
      const auto& r = world.records[i];
      write_png(d.image(r.image_pre).string(), world.images[i].pre);
      write_png(d.image(r.image_post).string(), world.images[i].post);
      layouts.push_back(layout_json(r.id, world.layouts[i]));
    }
    write_json_file(d.layouts().string(), layouts);
    write_metadata(commands_.at("synth"), d.root / "metadata.json");
    out_ << "wrote " << world.records.size() << " trajectories to " << d.root.string() << "\n";
    return 0;
  }

  int run_filter() {
    const DataDir d = data_dir();
    auto records = read_records(records_path());
    FilterThresholds t;
    t.max_changed_pixels = max_changed_;
    t.min_max_change = min_max_change_;
    if (scale_thresholds_) {
      if (records.empty()) throw ValidationError("no records to filter");
      const Image probe = read_png(d.image(records.front().image_pre).string());
      const auto scaled = FilterThresholds::scaled_to(probe.width, probe.height);
      t.max_changed_pixels = static_cast<std::int64_t>(std::llround(
          static_cast<double>(max_changed_) * static_cast<double>(scaled.max_changed_pixels) / 400'000.0));
    }
    auto result = apply_visual_filters(
        records,
        [&](const TrajectoryRecord& r) -> std::optional<ImagePair> {
          const auto pre = d.image(r.image_pre), post = d.image(r.image_post);
          if (!fs::exists(pre) || !fs::exists(post)) return std::nullopt;
          return ImagePair{read_png(pre.string()), read_png(post.string())};
        },
        t);
    const std::string out = out_path_.empty() ? (d.root / "filtered.jsonl").string() : out_path_;
    const std::string rep = report_.empty() ? (d.root / "filter_report.json").string() : report_;
    write_records(out, result.kept);
    write_json_file(rep, result.report.to_json());
    std::map<std::string, std::string> h;
    hash_into(h, records_path());
    write_metadata(commands_.at("filter"), fs::path(rep).parent_path() / "filter_metadata.json", {}, h);
    out_ << "kept " << result.report.kept << " of " << result.report.total << " (viewpoint "
         << result.report.viewpoint_change << ", no salient change " << result.report.no_salient_change
         << ", missing " << result.report.asset_missing << ")\n";
    return 0;
  }

  int run_split() {
    const DataDir d = data_dir();
    const auto schema = read_schema(d.schema().string());
    const auto records = read_records(records_path());
    std::vector<std::string> objects;
    std::vector<ExcludedPair> pairs;
    if (!excluded_objects_.empty()) objects = read_excluded_objects(excluded_objects_);
    if (!excluded_pairs_.empty()) pairs = read_excluded_pairs(excluded_pairs_);
    SplitSizes sizes{train_, val_, test_};
    if (train_ == 0 && val_ == 0) {
      ExclusionIndex index(schema, objects, pairs);
      std::size_t clean = 0;
      for (const auto& r : records) clean += !index.mentions(r);
      if (test_ > clean) throw ValidationError("--test exceeds the records available after exclusion");
      sizes.val = static_cast<std::size_t>(std::llround(val_fraction_ * static_cast<double>(clean - test_)));
      sizes.train = clean - test_ - sizes.val;
    }
    auto m = build_zero_shot_split(records, schema, objects, pairs, sizes, seed_);
    const auto problems = audit_manifest(m, records, schema);
    if (!problems.empty()) throw ValidationError("manifest audit failed: " + problems.front());
    const std::string out = out_path_.empty() ? (d.root / "manifest.json").string() : out_path_;
    write_json_file(out, m.to_json());
    std::map<std::string, std::string> h;
    hash_into(h, records_path());
    hash_into(h, excluded_objects_);
    hash_into(h, excluded_pairs_);
    write_metadata(commands_.at("split"), fs::path(out).parent_path() / "split_metadata.json", {}, h);
    out_ << "train " << m.train_ids.size() << ", val " << m.val_ids.size() << ", test " << m.test_ids.size()
         << " (zero-shot " << m.zero_shot_test_ids.size() << ")\n";
    return 0;
  }

  int run_cache() {
    const DataDir d = data_dir();
    const auto schema = read_schema(d.schema().string());
    const auto records = read_records(records_path());
    StubBoxDetector detector(n_boxes_, box_dim_);
    HashTextEncoder text(text_dim_);
    std::vector<std::string> refs;
    std::unordered_set<std::string> seen;
    for (const auto& r : records) {
      for (const auto& ref : {r.image_pre, r.image_post}) {
        if (seen.insert(ref).second) refs.push_back(ref);
      }
    }
    const std::string boxes = box_cache_.empty() ? (d.root / "boxes.pvfc").string() : box_cache_;
    const std::string texts = text_cache_.empty() ? (d.root / "text.pvfc").string() : text_cache_;
    write_feature_cache(boxes, refs, [&](const std::string& ref) { return read_png(d.image(ref).string()); },
                        detector);
    std::vector<std::string> sentences;
    seen.clear();
    for (const auto& r : records) {
      if (r.action.text && seen.insert(*r.action.text).second) sentences.push_back(*r.action.text);
    }
    for (const auto& t : label_texts(schema, static_cast<int>(kNumActions))) {
      if (seen.insert(t).second) sentences.push_back(t);
    }
    write_text_cache(texts, sentences, text);
    std::map<std::string, std::string> h;
    hash_into(h, records_path());
    write_metadata(commands_.at("cache-features"), fs::path(boxes).parent_path() / "cache_metadata.json",
                   {{"detector", "stub"}, {"text_encoder", "hash"}}, h);
    out_ << "cached " << refs.size() << " images and " << sentences.size() << " texts\n";
    return 0;
  }

  TrainConfig train_config(bool finetune) const {
    TrainConfig t = TrainConfig::paper(finetune ? Phase::kFinetune : Phase::kPretrain);
    t.epochs = epochs_;
    t.batch_size = batch_;
    t.learning_rate = lr_;
    t.patience = patience_;
    t.seed = seed_;
    return t;
  }

  int run_train(bool finetune) {
    const Command& cmd = commands_.at(finetune ? "finetune" : "pretrain");
    auto in = load_inputs(true);
    const auto train = in.subset(in.manifest.train_ids);
    const auto val = in.subset(in.manifest.val_ids);
    if (train.empty()) throw ValidationError("manifest has no training records");
    const auto tc = train_config(finetune);
    fs::create_directories(out_path_);
    TrainHooks hooks;
    hooks.on_epoch = [this](const EpochRecord& e) {
      out_ << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << "\n";
    };
    const auto td = Dataset::of(train, &in.schema, &in.features);
    const auto vd = Dataset::of(val, &in.schema, &in.features);
    json extra;
    extra["train_config"] = tc.to_json();
    std::optional<TrainResult<float>> result;
    if (finetune) {
      hash_into(in.hashes, checkpoint_);
      result = run_finetuning<float>(checkpoint_, td, vd, tc, std::nullopt, hooks);
    } else {
      ModelConfig mc = ModelConfig::for_setup(parse_setup(setup_), ModelConfig::sizes_of(in.schema));
      mc.hidden_size = hidden_;
      mc.feedforward_size = ffn_;
      mc.dropout = dropout_;
      if (mc.use_images) {
        if (!in.features.has_boxes()) throw ValidationError("setup " + setup_ + " needs --box-cache");
        mc.n_boxes = in.features.n_boxes();
        mc.box_dim = in.features.box_dim();
      }
      if (mc.use_text_labels) {
        if (!in.features.has_text()) throw ValidationError("setup " + setup_ + " needs --text-cache");
        mc.text_embed_dim = in.features.text_dim();
      }
      result = run_pretraining<float>(mc, td, vd, tc, hooks);
    }
    extra["model_config"] = result->model.config().to_json();
    extra["best_epoch"] = result->best_epoch;
    extra["stopped_early"] = result->stopped_early;
    extra["parameters"] = result->model.parameter_count();
    const fs::path dir(out_path_);
    save_checkpoint((dir / "checkpoint.pdck").string(), result->model);
    write_history_csv((dir / "history.csv").string(), result->history);
    write_metadata(cmd, dir / "metadata.json", extra, in.hashes);
    out_ << "best epoch " << result->best_epoch << "; checkpoint " << (dir / "checkpoint.pdck").string() << "\n";
    return 0;
  }

  int run_eval() {
    auto in = load_inputs(true);
    auto model = load_model<float>(checkpoint_);
    hash_into(in.hashes, checkpoint_);
    const auto& ids = split_ == "train" ? in.manifest.train_ids
                      : split_ == "val" ? in.manifest.val_ids
                                        : in.manifest.test_ids;
    const auto records = in.subset(ids);
    if (records.empty()) throw ValidationError("split " + split_ + " is empty");
    std::unordered_set<std::string> zs;
    if (split_ == "test") zs.insert(in.manifest.zero_shot_test_ids.begin(), in.manifest.zero_shot_test_ids.end());
    const auto report = evaluate_model(model, pointers(records), in.schema, &in.features, zs, seed_);
    fs::path out(out_path_);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_json_file(out.string(), report.to_json());
    write_metadata(commands_.at("eval"), out.parent_path() / (out.stem().string() + "_metadata.json"),
                   {{"split", split_}}, in.hashes);
    out_ << "overall " << round2(report.overall_accuracy);
    if (report.zero_shot_accuracy) out_ << ", zero-shot " << round2(*report.zero_shot_accuracy);
    out_ << " over " << report.n_objects_scored << " objects\n";
    return 0;
  }

  int run_attn() {
    const DataDir d = data_dir();
    const auto schema = read_schema(d.schema().string());
    const auto records = read_records(records_path());
    auto model = load_model<float>(checkpoint_);
    const auto& cfg = model.config();
    if (!cfg.use_images) throw ValidationError("checkpoint has no vision branch");
    const TrajectoryRecord* rec = nullptr;
    for (const auto& r : records) {
      if (r.id == record_id_) rec = &r;
    }
    if (!rec) throw ValidationError("no record with id " + record_id_);
    FeatureStore text;
    if (!text_cache_.empty()) text.load_text_cache(text_cache_);
    const ImagePair images{read_png(d.image(rec->image_pre).string()), read_png(d.image(rec->image_post).string())};
    StubBoxDetector detector(cfg.n_boxes, cfg.box_dim);
    auto maps = export_attention_maps(model, *rec, images, detector, schema, text, out_path_, rec->id);
    std::map<std::string, std::string> h;
    hash_into(h, checkpoint_);
    write_metadata(commands_.at("attn-maps"), fs::path(out_path_) / (rec->id + "_metadata.json"), {}, h);
    for (const auto& f : maps.files) out_ << f << "\n";
    return 0;
  }

  int run_report() {
    std::map<std::string, std::vector<EvalReport>> by_setup;
    std::map<std::string, std::string> h;
    for (const auto& r : runs_) {
      fs::path p(r);
      if (fs::is_directory(p)) p /= "report.json";
      if (!fs::exists(p)) throw IoError("no report at " + p.string());
      auto rep = EvalReport::from_json(read_json_file(p.string()));
      by_setup[rep.setup].push_back(rep);
    }
    std::vector<AggregateReport> rows;
    for (const auto& s : kAllSetups) {
      auto it = by_setup.find(setup_name(s));
      if (it != by_setup.end()) rows.push_back(aggregate_runs(it->second));
    }
    for (const auto& [name, reps] : by_setup) {
      bool known = false;
      for (const auto& s : kAllSetups) known |= setup_name(s) == name;
      if (!known) rows.push_back(aggregate_runs(reps));
    }
    std::vector<std::string> cols = {"overall", "zero_shot"};
    const std::string table = format_table(rows, cols, {"overall", "zero-shot"}) + "\n" +
                              format_table(rows, common_columns(rows, "action/"));
    if (!csv_.empty()) {
      std::vector<std::string> all = cols;
      for (const auto& c : common_columns(rows, "action/")) all.push_back(c);
      for (const auto& c : common_columns(rows, "attribute/")) all.push_back(c);
      std::ofstream f(csv_, std::ios::binary);
      if (!f) throw IoError("cannot write " + csv_);
      f << format_csv(rows, all);
    }
    if (!table_.empty()) {
      std::ofstream f(table_, std::ios::binary);
      if (!f) throw IoError("cannot write " + table_);
      f << table;
    } else {
      out_ << table;
    }
    return 0;
  }
};

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Dispatcher d(out, err);
  return d.dispatch(argc, argv);
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Dispatcher d(out, err);
  return d.dispatch(args);
}

}  // namespace physdyn::cli
