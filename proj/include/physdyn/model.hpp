#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "physdyn/errors.hpp"
#include "physdyn/feature_cache.hpp"
#include "physdyn/nn/autograd.hpp"
#include "physdyn/nn/layers.hpp"
#include "physdyn/schema.hpp"

namespace physdyn {

using nn::Matrix;
using nn::Var;

enum class Setup { kBase, kBaseSymbolic, kBaseImages, kBaseSymbolicImages, kBaseImagesTextLabels };

inline constexpr std::array<Setup, 5> kAllSetups = {Setup::kBase, Setup::kBaseSymbolic, Setup::kBaseImages,
                                                    Setup::kBaseSymbolicImages, Setup::kBaseImagesTextLabels};

inline std::string setup_name(Setup s) {
  switch (s) {
    case Setup::kBase: return "base";
    case Setup::kBaseSymbolic: return "base+symbolic";
    case Setup::kBaseImages: return "base+images";
    case Setup::kBaseSymbolicImages: return "base+symbolic+images";
    case Setup::kBaseImagesTextLabels: return "base+images+text-labels";
  }
  return "?";
}

inline Setup parse_setup(std::string_view name) {
  for (auto s : kAllSetups) {
    if (setup_name(s) == name) return s;
  }
  throw ValidationError("unknown setup '" + std::string(name) + "'");
}

enum class ActionInput { kSymbolic, kText };

struct ModelConfig {
  int hidden_size = 64;
  double dropout = 0.1;
  int encoder_layers = 3;
  int encoder_heads = 4;
  int decoder_layers = 3;
  int decoder_heads = 4;
  int feedforward_size = 2048;
  int action_mlp_layers = 2;
  int n_actions = static_cast<int>(kNumActions);
  std::vector<int> attribute_sizes;  // slot 0 is the object name
  int n_boxes = 0;
  int box_dim = 0;
  bool use_symbolic = false;
  bool use_images = false;
  bool use_text_labels = false;
  ActionInput action_input = ActionInput::kSymbolic;
  int text_embed_dim = 0;

  int n_slots() const { return static_cast<int>(attribute_sizes.size()); }
  int n_values() const {
    int n = 0;
    for (int s : attribute_sizes) n += s;
    return n;
  }
  int n_object_names() const { return attribute_sizes.empty() ? 0 : attribute_sizes[0]; }

  std::vector<nn::SlotRange> ranges() const {
    std::vector<nn::SlotRange> out;
    int off = 0;
    for (int s : attribute_sizes) {
      out.push_back({off, s});
      off += s;
    }
    return out;
  }

  bool needs_text() const { return use_text_labels || action_input == ActionInput::kText; }

  Setup setup() const {
    if (use_text_labels) return Setup::kBaseImagesTextLabels;
    if (use_symbolic && use_images) return Setup::kBaseSymbolicImages;
    if (use_symbolic) return Setup::kBaseSymbolic;
    if (use_images) return Setup::kBaseImages;
    return Setup::kBase;
  }

  static ModelConfig for_setup(Setup s, std::vector<int> attribute_sizes) {
    ModelConfig c;
    c.attribute_sizes = std::move(attribute_sizes);
    c.use_symbolic = s == Setup::kBaseSymbolic || s == Setup::kBaseSymbolicImages;
    c.use_images = s == Setup::kBaseImages || s == Setup::kBaseSymbolicImages || s == Setup::kBaseImagesTextLabels;
    c.use_text_labels = s == Setup::kBaseImagesTextLabels;
    return c;
  }

  static std::vector<int> sizes_of(const AttributeSchema& schema) {
    std::vector<int> out;
    for (std::size_t i = 0; i < schema.size(); ++i) out.push_back(static_cast<int>(schema.vocabulary_size(i)));
    return out;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
    if (hidden_size <= 0) fail("hidden_size must be positive");
    if (encoder_heads <= 0 || hidden_size % encoder_heads != 0) fail("hidden_size must be divisible by encoder_heads");
    if (decoder_heads <= 0 || hidden_size % decoder_heads != 0) fail("hidden_size must be divisible by decoder_heads");
    if (encoder_layers < 1 || decoder_layers < 1) fail("layer counts must be positive");
    if (feedforward_size < 1) fail("feedforward_size must be positive");
    if (action_mlp_layers < 1) fail("action_mlp_layers must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
    if (n_actions < 1) fail("n_actions must be positive");
    if (attribute_sizes.empty()) fail("attribute_sizes is empty");
    for (int s : attribute_sizes) {
      if (s < 1) fail("every attribute needs at least one value");
    }
    if (use_text_labels && !use_images) fail("text labels require the image branch");
    if (use_text_labels && use_symbolic) fail("text labels are defined for the image-only setup");
    if (use_images && (n_boxes < 1 || box_dim < 1)) fail("image setups need n_boxes and box_dim");
    if (needs_text() && text_embed_dim < 1) fail("text inputs need text_embed_dim");
  }

  json to_json() const {
    return {{"setup", setup_name(setup())},
            {"hidden_size", hidden_size},
            {"dropout", dropout},
            {"encoder_layers", encoder_layers},
            {"encoder_heads", encoder_heads},
            {"decoder_layers", decoder_layers},
            {"decoder_heads", decoder_heads},
            {"feedforward_size", feedforward_size},
            {"action_mlp_layers", action_mlp_layers},
            {"n_actions", n_actions},
            {"attribute_sizes", attribute_sizes},
            {"n_boxes", n_boxes},
            {"box_dim", box_dim},
            {"use_symbolic", use_symbolic},
            {"use_images", use_images},
            {"use_text_labels", use_text_labels},
            {"action_input", action_input == ActionInput::kText ? "text" : "symbolic"},
            {"text_embed_dim", text_embed_dim}};
  }

  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.hidden_size = j.at("hidden_size");
    c.dropout = j.at("dropout");
    c.encoder_layers = j.at("encoder_layers");
    c.encoder_heads = j.at("encoder_heads");
    c.decoder_layers = j.at("decoder_layers");
    c.decoder_heads = j.at("decoder_heads");
    c.feedforward_size = j.at("feedforward_size");
    c.action_mlp_layers = j.at("action_mlp_layers");
    c.n_actions = j.at("n_actions");
    c.attribute_sizes = j.at("attribute_sizes").get<std::vector<int>>();
    c.n_boxes = j.at("n_boxes");
    c.box_dim = j.at("box_dim");
    c.use_symbolic = j.at("use_symbolic");
    c.use_images = j.at("use_images");
    c.use_text_labels = j.at("use_text_labels");
    const std::string ai = j.at("action_input");
    if (ai != "text" && ai != "symbolic") throw ValidationError("unknown action_input '" + ai + "'");
    c.action_input = ai == "text" ? ActionInput::kText : ActionInput::kSymbolic;
    c.text_embed_dim = j.at("text_embed_dim");
    return c;
  }

  // Fields that shape the shared weights; dropout and the action input path
  // may differ between a checkpoint and the model it initializes.
  json architecture_json() const {
    json j = to_json();
    j.erase("dropout");
    j.erase("action_input");
    j.erase("setup");
    if (!use_text_labels) j.erase("text_embed_dim");
    return j;
  }
};

// ---------------------------------------------------------------------------
// Batches

enum BatchField : unsigned {
  kFieldObjectNames = 1u << 0,
  kFieldSymbolicStates = 1u << 1,
  kFieldSymbolicAction = 1u << 2,
  kFieldActionText = 1u << 3,
  kFieldBoxesPre = 1u << 4,
  kFieldBoxesPost = 1u << 5,
  kFieldLabelText = 1u << 6,
};

inline std::string batch_field_name(unsigned f) {
  switch (f) {
    case kFieldObjectNames: return "object names";
    case kFieldSymbolicStates: return "symbolic object states";
    case kFieldSymbolicAction: return "symbolic actions";
    case kFieldActionText: return "action text embeddings";
    case kFieldBoxesPre: return "pre-action box features";
    case kFieldBoxesPost: return "post-action box features";
    case kFieldLabelText: return "label text embeddings";
  }
  return "?";
}

// Inputs a configuration reads.
inline unsigned required_fields(const ModelConfig& c) {
  unsigned f = 0;
  if (c.use_symbolic) f |= kFieldSymbolicStates;
  if (c.use_images) f |= kFieldBoxesPre | kFieldBoxesPost;
  if (c.use_text_labels) {
    f |= kFieldLabelText;
  } else if (c.use_images || !c.use_symbolic) {
    f |= kFieldObjectNames;
  }
  if (c.action_input == ActionInput::kText) {
    f |= kFieldActionText;
  } else if (!c.use_text_labels) {
    f |= kFieldSymbolicAction;
  }
  return f;
}

struct SymbolicActions {
  std::vector<int> ids, objects, receptacles;
};

template <class T>
struct LabelTexts {
  Matrix<T> names;             // objects x text_dim
  Matrix<T> actions;           // trajectories x text_dim
  Matrix<T> action_objects;    // trajectories x text_dim
  Matrix<T> action_receptacles;
};

template <class T>
struct BatchInputs {
  std::optional<std::vector<int>> object_names;     // per object, ObjectName value
  std::optional<std::vector<int>> symbolic_states;  // objects * slots global value indices
  std::optional<SymbolicActions> actions;
  std::optional<Matrix<T>> action_text;             // trajectories x text_dim
  std::optional<Matrix<T>> boxes_pre, boxes_post;   // trajectories*N x D
  std::optional<LabelTexts<T>> labels;
};

template <class T>
struct BatchTargets {
  std::vector<int> pre, post;  // objects * slots global value indices
  std::vector<T> weight;       // per object; 0 for None objects
  std::vector<int> action;     // per object, its trajectory's action id
};

// Two objects per trajectory; object m belongs to trajectory m / 2. Input
// accessors record which fields were read so routing can be audited.
template <class T>
class Batch {
 public:
  Batch(int trajectories, int slots, BatchInputs<T> inputs, BatchTargets<T> targets, std::vector<std::string> ids = {})
      : trajectories_(trajectories), slots_(slots), in_(std::move(inputs)), targets_(std::move(targets)),
        ids_(std::move(ids)) {}

  int trajectories() const { return trajectories_; }
  int objects() const { return 2 * trajectories_; }
  int slots() const { return slots_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const BatchTargets<T>& targets() const { return targets_; }

  unsigned accessed() const { return accessed_; }
  void reset_access() const { accessed_ = 0; }
  unsigned available() const {
    return (in_.object_names ? kFieldObjectNames : 0u) | (in_.symbolic_states ? kFieldSymbolicStates : 0u) |
           (in_.actions ? kFieldSymbolicAction : 0u) | (in_.action_text ? kFieldActionText : 0u) |
           (in_.boxes_pre ? kFieldBoxesPre : 0u) | (in_.boxes_post ? kFieldBoxesPost : 0u) |
           (in_.labels ? kFieldLabelText : 0u);
  }

  const std::vector<int>& object_names() const { return get(in_.object_names, kFieldObjectNames); }
  const std::vector<int>& symbolic_states() const { return get(in_.symbolic_states, kFieldSymbolicStates); }
  const SymbolicActions& actions() const { return get(in_.actions, kFieldSymbolicAction); }
  const Matrix<T>& action_text() const { return get(in_.action_text, kFieldActionText); }
  const Matrix<T>& boxes_pre() const { return get(in_.boxes_pre, kFieldBoxesPre); }
  const Matrix<T>& boxes_post() const { return get(in_.boxes_post, kFieldBoxesPost); }
  const LabelTexts<T>& labels() const { return get(in_.labels, kFieldLabelText); }

 private:
  template <class U>
  const U& get(const std::optional<U>& field, unsigned flag) const {
    if (!field) throw ValidationError("batch lacks " + batch_field_name(flag) + " required by the model setup");
    accessed_ |= flag;
    return *field;
  }

  int trajectories_;
  int slots_;
  BatchInputs<T> in_;
  BatchTargets<T> targets_;
  std::vector<std::string> ids_;
  mutable unsigned accessed_ = 0;
};

namespace detail {

template <class T>
Matrix<T> text_row(const FeatureStore& fs, const std::string& text) {
  const auto& v = fs.text(text);
  Matrix<T> m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = static_cast<T>(v[i]);
  return m;
}

}  // namespace detail

// Texts the label-text path looks up for object names and actions.
inline std::string object_label_text(const AttributeSchema& schema, int name_value) {
  return label_text(schema.object_name(static_cast<std::size_t>(name_value)));
}
inline std::string action_label_text(int action_id) { return label_text(action_name(action_id)); }

// Builds a batch holding `fields` (defaults to what the config reads).
template <class T>
Batch<T> make_batch(const std::vector<const TrajectoryRecord*>& records, const ModelConfig& config,
                    const AttributeSchema* schema, const FeatureStore* features, std::optional<unsigned> fields = {}) {
  const unsigned want = fields.value_or(required_fields(config));
  const int B = static_cast<int>(records.size());
  const int S = config.n_slots();
  const auto ranges = config.ranges();
  if (B == 0) throw ValidationError("empty batch");

  auto global = [&](const ObjectState& o, std::vector<int>& out, const std::string& id) {
    for (int i = 0; i < S; ++i) {
      int v = 0;
      if (!o.values.empty()) {
        if (static_cast<int>(o.values.size()) != S) {
          throw ValidationError(id + ": attribute count " + std::to_string(o.values.size()) + " != " + std::to_string(S));
        }
        v = o.values[static_cast<std::size_t>(i)];
      }
      if (v >= ranges[static_cast<std::size_t>(i)].size) {
        throw ValidationError(id + ": value " + std::to_string(v) + " out of range for slot " + std::to_string(i));
      }
      out.push_back(ranges[static_cast<std::size_t>(i)].offset + v);
    }
  };

  BatchInputs<T> in;
  BatchTargets<T> tg;
  std::vector<std::string> ids;
  std::vector<int> names, states;
  SymbolicActions acts;
  for (const auto* r : records) {
    ids.push_back(r->id);
    for (int k = 0; k < 2; ++k) {
      const auto& pre = r->objects_pre[static_cast<std::size_t>(k)];
      const auto& post = r->objects_post[static_cast<std::size_t>(k)];
      global(pre, tg.pre, r->id);
      global(post, tg.post, r->id);
      tg.weight.push_back((pre.is_none || post.is_none) ? T(0) : T(1));
      tg.action.push_back(r->action.action_id);
      names.push_back(pre.values.empty() ? 0 : pre.values[0]);
    }
    if (r->action.action_id < 0 || r->action.action_id >= config.n_actions) {
      throw ValidationError(r->id + ": unknown action " + std::to_string(r->action.action_id));
    }
    acts.ids.push_back(r->action.action_id);
    acts.objects.push_back(r->action.object_name);
    acts.receptacles.push_back(r->action.receptacle_name);
  }
  if (want & kFieldObjectNames) in.object_names = names;
  if (want & kFieldSymbolicStates) in.symbolic_states = tg.pre;
  if (want & kFieldSymbolicAction) in.actions = acts;

  const bool need_store = want & (kFieldActionText | kFieldBoxesPre | kFieldBoxesPost | kFieldLabelText);
  if (need_store && !features) throw ValidationError("setup needs cached features but none were supplied");
  if (want & (kFieldBoxesPre | kFieldBoxesPost)) {
    const int N = features->n_boxes(), D = features->box_dim();
    if (N != config.n_boxes || D != config.box_dim) {
      throw ValidationError("feature cache is " + std::to_string(N) + "x" + std::to_string(D) + ", model expects " +
                            std::to_string(config.n_boxes) + "x" + std::to_string(config.box_dim));
    }
    Matrix<T> bp(B * N, D), bq(B * N, D);
    for (int b = 0; b < B; ++b) {
      bp.middleRows(b * N, N) = features->boxes(records[static_cast<std::size_t>(b)]->image_pre).template cast<T>();
      bq.middleRows(b * N, N) = features->boxes(records[static_cast<std::size_t>(b)]->image_post).template cast<T>();
    }
    if (want & kFieldBoxesPre) in.boxes_pre = std::move(bp);
    if (want & kFieldBoxesPost) in.boxes_post = std::move(bq);
  }
  if (want & (kFieldActionText | kFieldLabelText)) {
    if (features->text_dim() != config.text_embed_dim) {
      throw ValidationError("text embeddings have dimension " + std::to_string(features->text_dim()) +
                            ", model expects " + std::to_string(config.text_embed_dim));
    }
  }
  if (want & kFieldActionText) {
    Matrix<T> m(B, config.text_embed_dim);
    for (int b = 0; b < B; ++b) {
      const auto& a = records[static_cast<std::size_t>(b)]->action;
      if (!a.text) throw ValidationError(records[static_cast<std::size_t>(b)]->id + ": action has no text");
      m.row(b) = detail::text_row<T>(*features, *a.text);
    }
    in.action_text = std::move(m);
  }
  if (want & kFieldLabelText) {
    if (!schema) throw ValidationError("label text needs the attribute schema");
    LabelTexts<T> lt;
    const int td = config.text_embed_dim;
    lt.names.resize(2 * B, td);
    lt.actions.resize(B, td);
    lt.action_objects.resize(B, td);
    lt.action_receptacles.resize(B, td);
    for (int m = 0; m < 2 * B; ++m) lt.names.row(m) = detail::text_row<T>(*features, object_label_text(*schema, names[static_cast<std::size_t>(m)]));
    for (int b = 0; b < B; ++b) {
      lt.actions.row(b) = detail::text_row<T>(*features, action_label_text(acts.ids[static_cast<std::size_t>(b)]));
      lt.action_objects.row(b) = detail::text_row<T>(*features, object_label_text(*schema, acts.objects[static_cast<std::size_t>(b)]));
      lt.action_receptacles.row(b) =
          detail::text_row<T>(*features, object_label_text(*schema, acts.receptacles[static_cast<std::size_t>(b)]));
    }
    in.labels = std::move(lt);
  }
  return Batch<T>(B, S, std::move(in), std::move(tg), std::move(ids));
}

// ---------------------------------------------------------------------------
// Model

struct Predictions {
  int objects = 0;
  int slots = 0;
  std::vector<int> post;  // objects * slots local value indices
  std::vector<int> pre;
  Matrix<double> alpha_pre, alpha_post;  // objects x N when images are active
};

template <class T>
class DynamicsModel {
 public:
  struct Graph {
    Var logits;  // one row per object: [0, M) post branch, [M, 2M) pre branch
    int objects = 0;
    Matrix<T> alpha_pre, alpha_post;
  };

  DynamicsModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)), init_rng_(seed), dropout_rng_(seed ^ 0xD7E5) {
    config_.validate();
    build();
  }

  const ModelConfig& config() const { return config_; }
  nn::ParameterStore<T>& parameters() { return store_; }
  const nn::ParameterStore<T>& parameters() const { return store_; }
  std::size_t parameter_count() const { return store_.count(); }
  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }
  void set_dropout(double p) { config_.dropout = p; }

  // Routes actions through the text projection, creating it when absent.
  void use_text_actions(int text_dim, std::uint64_t seed) {
    if (text_dim < 1) throw ValidationError("text actions need a positive embedding dimension");
    if (config_.text_embed_dim != 0 && config_.text_embed_dim != text_dim && config_.use_text_labels) {
      throw ValidationError("text dimension differs from the label-text dimension");
    }
    config_.text_embed_dim = text_dim;
    config_.action_input = ActionInput::kText;
    if (!store_.contains("action_encoder.text.proj.weight")) {
      std::mt19937_64 rng(seed);
      nn::make_linear(store_, rng, "action_encoder.text.proj", text_dim, config_.hidden_size);
    }
  }

  // ---- batched graph ------------------------------------------------------

  Graph forward(nn::Tape<T>& tape, const Batch<T>& batch, bool training) {
    nn::Context<T> c{&tape, &store_, config_.dropout, training && config_.dropout > 0 ? &dropout_rng_ : nullptr};
    const int M = batch.objects();
    const int B = batch.trajectories();
    Graph g;
    g.objects = M;

    std::optional<Var> cond;  // conditional name vector for the vision branch
    auto condition = [&]() {
      if (!cond) cond = object_names(c, batch);
      return *cond;
    };

    Var h_pre;
    std::optional<Var> vis_post;
    const Setup s = config_.setup();
    if (s == Setup::kBase) h_pre = condition();
    if (config_.use_symbolic) h_pre = encode_objects(c, batch.symbolic_states(), M);
    if (config_.use_images) {
      std::vector<int> group(static_cast<std::size_t>(M));
      for (int m = 0; m < M; ++m) group[static_cast<std::size_t>(m)] = m / 2;
      Var v_pre = vision(c, condition(), batch.boxes_pre(), config_.n_boxes, group, &g.alpha_pre);
      vis_post = vision(c, condition(), batch.boxes_post(), config_.n_boxes, group, &g.alpha_post);
      h_pre = config_.use_symbolic ? nn::add(tape, h_pre, v_pre) : v_pre;
    }

    Var h_a = nn::repeat_rows(tape, encode_actions(c, batch, B), 2);
    Var mem_post = apply_action(c, h_a, h_pre);
    Var src_post = vis_post ? nn::add(tape, h_pre, *vis_post) : h_pre;
    Var mem_pre = tape.constant(Matrix<T>::Zero(M, config_.hidden_size));
    Var memory = nn::concat_rows(tape, mem_post, mem_pre);
    Var source = nn::concat_rows(tape, src_post, h_pre);
    g.logits = decode(c, memory, source, 2 * M);
    return g;
  }

  // Mean cross-entropy over scored (object, slot) entries of the post branch
  // plus the same mean for the pre branch.
  Var loss(nn::Tape<T>& tape, const Graph& g, const Batch<T>& batch) const {
    const auto& tg = batch.targets();
    const int S = config_.n_slots();
    const std::size_t MS = static_cast<std::size_t>(g.objects) * static_cast<std::size_t>(S);
    T scored = 0;
    for (auto w : tg.weight) scored += w * T(S);
    std::vector<T> w(2 * MS, T(0));
    if (scored > T(0)) {
      for (std::size_t r = 0; r < MS; ++r) w[r] = w[MS + r] = tg.weight[r / static_cast<std::size_t>(S)] / scored;
    }
    std::vector<int> targets(tg.post);
    targets.insert(targets.end(), tg.pre.begin(), tg.pre.end());
    return nn::slot_cross_entropy(tape, g.logits, config_.ranges(), targets, std::move(w));
  }

  // Evaluation-mode loss without recording gradients.
  T evaluate_loss(const Batch<T>& batch) {
    nn::Tape<T> tape(false);
    auto g = forward(tape, batch, false);
    return tape.value(loss(tape, g, batch))(0, 0);
  }

  Predictions predict(const Batch<T>& batch) {
    nn::Tape<T> tape(false);
    auto g = forward(tape, batch, false);
    const auto& L = tape.value(g.logits);
    const int S = config_.n_slots();
    const auto ranges = config_.ranges();
    Predictions p;
    p.objects = g.objects;
    p.slots = S;
    const std::size_t MS = static_cast<std::size_t>(g.objects) * static_cast<std::size_t>(S);
    p.post.resize(MS);
    p.pre.resize(MS);
    for (std::size_t r = 0; r < 2 * MS; ++r) {
      const auto& rg = ranges[r % static_cast<std::size_t>(S)];
      const auto row = static_cast<Eigen::Index>(r / static_cast<std::size_t>(S));
      int best = 0;
      for (int v = 1; v < rg.size; ++v) {
        if (L(row, rg.offset + v) > L(row, rg.offset + best)) best = v;
      }
      (r < MS ? p.post[r] : p.pre[r - MS]) = best;
    }
    p.alpha_pre = g.alpha_pre.template cast<double>();
    p.alpha_post = g.alpha_post.template cast<double>();
    return p;
  }

  // ---- single-object operations -------------------------------------------

  // 38 x h (slots x h): value embedding plus slot position embedding.
  Matrix<T> embed_attributes(const std::vector<std::uint16_t>& values) {
    nn::Tape<T> t(false);
    nn::Context<T> c = eval_context(t);
    return t.value(embed_states(c, global_indices(values), 1));
  }

  Matrix<T> encode_object(const Matrix<T>& embedded) {
    if (embedded.rows() != config_.n_slots() || embedded.cols() != config_.hidden_size) {
      throw ValidationError("encode_object expects a " + std::to_string(config_.n_slots()) + "x" +
                            std::to_string(config_.hidden_size) + " sequence");
    }
    require(config_.use_symbolic, "encode_object needs the symbolic branch");
    nn::Tape<T> t(false);
    nn::Context<T> c = eval_context(t);
    return t.value(run_object_encoder(c, t.constant(embedded), 1));
  }

  Matrix<T> encode_action_symbolic(const ActionRecord& a) {
    require(store_.contains("action_encoder.symbolic.action_embedding"), "model has no symbolic action encoder");
    if (a.action_id < 0 || a.action_id >= config_.n_actions) throw ValidationError("unknown action id " + std::to_string(a.action_id));
    if (a.object_name < 0 || a.object_name >= config_.n_object_names() || a.receptacle_name < 0 ||
        a.receptacle_name >= config_.n_object_names()) {
      throw ValidationError("action object or receptacle id out of range");
    }
    nn::Tape<T> t(false);
    nn::Context<T> c = eval_context(t);
    SymbolicActions acts{{a.action_id}, {a.object_name}, {a.receptacle_name}};
    return t.value(action_mlp(c, symbolic_action_sum(c, acts)));
  }

  Matrix<T> encode_action_text(const std::vector<float>& embedding) {
    require(store_.contains("action_encoder.text.proj.weight"), "model has no text action encoder");
    if (static_cast<int>(embedding.size()) != config_.text_embed_dim) {
      throw ValidationError("text embedding has dimension " + std::to_string(embedding.size()) + ", expected " +
                            std::to_string(config_.text_embed_dim));
    }
    nn::Tape<T> t(false);
    nn::Context<T> c = eval_context(t);
    Matrix<T> x(1, static_cast<Eigen::Index>(embedding.size()));
    for (std::size_t i = 0; i < embedding.size(); ++i) x(0, static_cast<Eigen::Index>(i)) = static_cast<T>(embedding[i]);
    return t.value(nn::apply_linear(c, "action_encoder.text.proj", t.constant(x)));
  }

  // Returns (h_o, alpha) for one object over one image's boxes.
  std::pair<Matrix<T>, Matrix<T>> encode_vision_object(const Matrix<T>& boxes, int object_name) {
    require(config_.use_images, "vision branch inactive");
    if (boxes.rows() < 1) throw ValidationError("empty box set");
    if (boxes.cols() != config_.box_dim) throw ValidationError("box feature dimension mismatch");
    require(!config_.use_text_labels, "text-label models condition on label text, not name ids");
    nn::Tape<T> t(false);
    nn::Context<T> c = eval_context(t);
    Var hc = nn::gather_rows(t, c.p("embeddings.attribute"), {object_name});
    Matrix<T> alpha;
    Var h = vision(c, hc, boxes, static_cast<int>(boxes.rows()), {0}, &alpha);
    return {t.value(h), alpha};
  }

  Matrix<T> apply_action(const Matrix<T>& h_a, const Matrix<T>& h_obj) {
    if (h_a.cols() != config_.hidden_size || h_obj.cols() != config_.hidden_size || h_a.rows() != h_obj.rows()) {
      throw ValidationError("apply_action expects matching h-vectors");
    }
    nn::Tape<T> t(false);
    nn::Context<T> c = eval_context(t);
    return t.value(apply_action(c, t.constant(h_a), t.constant(h_obj)));
  }

  // slots x n_values logits; values outside each slot's range are -inf.
  Matrix<T> decode_object(const Matrix<T>& memory, const Matrix<T>& source) {
    if (memory.rows() != 1 || source.rows() != 1 || memory.cols() != config_.hidden_size ||
        source.cols() != config_.hidden_size) {
      throw ValidationError("decode_object expects two 1 x h vectors");
    }
    nn::Tape<T> t(false);
    nn::Context<T> c = eval_context(t);
    return expand_logits(t.value(decode(c, t.constant(memory), t.constant(source), 1)));
  }

  // Compact per-object logits (objects x n_values) to one masked row per
  // slot (objects*slots x n_values).
  Matrix<T> expand_logits(const Matrix<T>& compact) const {
    const auto ranges = config_.ranges();
    const int S = config_.n_slots();
    Matrix<T> out = Matrix<T>::Constant(compact.rows() * S, compact.cols(), -std::numeric_limits<T>::infinity());
    for (Eigen::Index m = 0; m < compact.rows(); ++m) {
      for (int i = 0; i < S; ++i) {
        const auto& rg = ranges[static_cast<std::size_t>(i)];
        out.row(m * S + i).segment(rg.offset, rg.size) = compact.row(m).segment(rg.offset, rg.size);
      }
    }
    return out;
  }

  // Mean cross-entropy of the post branch plus that of the pre branch. Logits
  // have one row per (object, slot), slot-major per object, as returned by
  // decode_object; targets are local value indices.
  T compute_loss(const Matrix<T>& logits_post, const std::vector<int>& target_post, const Matrix<T>& logits_pre,
                 const std::vector<int>& target_pre) const {
    nn::Tape<T> t(false);
    const auto ranges = config_.ranges();
    const auto S = static_cast<std::size_t>(config_.n_slots());
    auto branch = [&](const Matrix<T>& L, const std::vector<int>& tgt) {
      if (static_cast<std::size_t>(L.rows()) != tgt.size() || tgt.size() % S != 0 || L.cols() != config_.n_values()) {
        throw ValidationError("compute_loss: logits and targets disagree in shape");
      }
      Matrix<T> compact(static_cast<Eigen::Index>(tgt.size() / S), L.cols());
      std::vector<int> global(tgt.size());
      for (std::size_t r = 0; r < tgt.size(); ++r) {
        const auto& rg = ranges[r % S];
        if (tgt[r] < 0 || tgt[r] >= rg.size) throw ValidationError("target index masked out for its slot");
        global[r] = rg.offset + tgt[r];
        compact.row(static_cast<Eigen::Index>(r / S)).segment(rg.offset, rg.size) =
            L.row(static_cast<Eigen::Index>(r)).segment(rg.offset, rg.size);
      }
      const T w = T(1) / T(tgt.size());
      return nn::slot_cross_entropy(t, t.constant(compact), ranges, global, std::vector<T>(tgt.size(), w));
    };
    return t.value(nn::add(t, branch(logits_post, target_post), branch(logits_pre, target_pre)))(0, 0);
  }

 private:
  static void require(bool ok, const std::string& message) {
    if (!ok) throw ValidationError(message);
  }

  nn::Context<T> eval_context(nn::Tape<T>& t) { return {&t, &store_, 0.0, nullptr}; }

  void build() {
    const int h = config_.hidden_size, S = config_.n_slots(), e = config_.n_values();
    auto& r = init_rng_;
    if (!config_.use_text_labels) store_.add("embeddings.attribute", nn::normal_matrix<T>(e, h, 1.0, r));
    if (config_.use_symbolic) {
      store_.add("object_encoder.position", nn::normal_matrix<T>(S, h, 1.0, r));
      for (int l = 0; l < config_.encoder_layers; ++l) {
        nn::make_encoder_layer(store_, r, "object_encoder.layer" + std::to_string(l), h, config_.feedforward_size);
      }
    }
    if (config_.use_text_labels) nn::make_linear(store_, r, "text_labels.proj", config_.text_embed_dim, h);
    if (!config_.use_text_labels) {
      store_.add("action_encoder.symbolic.action_embedding", nn::normal_matrix<T>(config_.n_actions, h, 1.0, r));
    }
    for (int l = 0; l < config_.action_mlp_layers; ++l) {
      nn::make_linear(store_, r, "action_encoder.mlp" + std::to_string(l), h, h);
    }
    if (config_.action_input == ActionInput::kText) {
      nn::make_linear(store_, r, "action_encoder.text.proj", config_.text_embed_dim, h);
    }
    if (config_.use_images) {
      nn::make_linear(store_, r, "vision_encoder.key", config_.box_dim, h, false);
      nn::make_linear(store_, r, "vision_encoder.value", config_.box_dim, h);
    }
    nn::make_linear(store_, r, "action_apply.layer0", 2 * h, h);
    nn::make_linear(store_, r, "action_apply.layer1", h, h);
    nn::make_linear(store_, r, "action_apply.layer2", h, h);
    store_.add("decoder.slot_query", nn::normal_matrix<T>(S, h, 1.0, r));
    for (int l = 0; l < config_.decoder_layers; ++l) {
      nn::make_decoder_layer(store_, r, "decoder.layer" + std::to_string(l), h, config_.feedforward_size);
    }
    nn::make_linear(store_, r, "decoder.head", h, e);
  }

  std::vector<int> global_indices(const std::vector<std::uint16_t>& values) const {
    const auto ranges = config_.ranges();
    if (static_cast<int>(values.size()) != config_.n_slots()) {
      throw ValidationError("attribute count " + std::to_string(values.size()) + " != " + std::to_string(config_.n_slots()));
    }
    std::vector<int> out;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i] >= ranges[i].size) {
        throw ValidationError("value " + std::to_string(values[i]) + " out of range for attribute " + std::to_string(i));
      }
      out.push_back(ranges[i].offset + values[i]);
    }
    return out;
  }

  Var object_names(const nn::Context<T>& c, const Batch<T>& batch) {
    if (config_.use_text_labels) return nn::apply_linear(c, "text_labels.proj", c.tape->constant(batch.labels().names));
    return nn::gather_rows(*c.tape, c.p("embeddings.attribute"), batch.object_names());
  }

  Var embed_states(const nn::Context<T>& c, const std::vector<int>& global, int n_objects) {
    auto& t = *c.tape;
    Var e = nn::gather_rows(t, c.p("embeddings.attribute"), global);
    Var pos = nn::tile_rows(t, c.p("object_encoder.position"), n_objects);
    return nn::add(t, e, pos);
  }

  Var run_object_encoder(const nn::Context<T>& c, Var x, int n_objects) {
    for (int l = 0; l < config_.encoder_layers; ++l) {
      x = nn::apply_encoder_layer(c, "object_encoder.layer" + std::to_string(l), x, n_objects, config_.encoder_heads);
    }
    std::vector<int> first(static_cast<std::size_t>(n_objects));
    for (int m = 0; m < n_objects; ++m) first[static_cast<std::size_t>(m)] = m * config_.n_slots();
    return nn::gather_rows(*c.tape, x, std::move(first));
  }

  Var encode_objects(const nn::Context<T>& c, const std::vector<int>& states, int n_objects) {
    return run_object_encoder(c, embed_states(c, states, n_objects), n_objects);
  }

  Var vision(const nn::Context<T>& c, Var cond, const Matrix<T>& boxes, int n, std::vector<int> group,
             Matrix<T>* alpha) {
    auto& t = *c.tape;
    Var keys = nn::matmul(t, t.constant(boxes), c.p("vision_encoder.key.weight"));
    Var pooled = nn::box_attention(t, cond, keys, boxes, n, std::move(group), alpha);
    return nn::apply_linear(c, "vision_encoder.value", pooled);
  }

  Var symbolic_action_sum(const nn::Context<T>& c, const SymbolicActions& a) {
    auto& t = *c.tape;
    Var E = c.p("embeddings.attribute");
    Var sum = nn::add(t, nn::gather_rows(t, c.p("action_encoder.symbolic.action_embedding"), a.ids),
                      nn::gather_rows(t, E, a.objects));
    return nn::add(t, sum, nn::gather_rows(t, E, a.receptacles));
  }

  Var action_mlp(const nn::Context<T>& c, Var x) {
    for (int l = 0; l < config_.action_mlp_layers; ++l) {
      if (l > 0) x = c.drop(x);
      x = nn::tanh(*c.tape, nn::apply_linear(c, "action_encoder.mlp" + std::to_string(l), x));
    }
    return x;
  }

  Var encode_actions(const nn::Context<T>& c, const Batch<T>& batch, int B) {
    auto& t = *c.tape;
    if (config_.action_input == ActionInput::kText) {
      return nn::apply_linear(c, "action_encoder.text.proj", t.constant(batch.action_text()));
    }
    if (config_.use_text_labels) {
      const auto& lt = batch.labels();
      auto proj = [&](const Matrix<T>& m) { return nn::apply_linear(c, "text_labels.proj", t.constant(m)); };
      Var sum = nn::add(t, proj(lt.actions), proj(lt.action_objects));
      return action_mlp(c, nn::add(t, sum, proj(lt.action_receptacles)));
    }
    (void)B;
    return action_mlp(c, symbolic_action_sum(c, batch.actions()));
  }

  Var apply_action(const nn::Context<T>& c, Var h_a, Var h_obj) {
    auto& t = *c.tape;
    Var x = nn::concat_cols(t, h_a, h_obj);
    x = nn::tanh(t, nn::apply_linear(c, "action_apply.layer0", x));
    x = nn::tanh(t, nn::apply_linear(c, "action_apply.layer1", c.drop(x)));
    return nn::tanh(t, nn::apply_linear(c, "action_apply.layer2", c.drop(x)));
  }

  // memory and source have one row per decoded object; returns compact logits.
  Var decode(const nn::Context<T>& c, Var memory, Var source, int rows) {
    auto& t = *c.tape;
    const int S = config_.n_slots();
    Var x = nn::add(t, nn::tile_rows(t, c.p("decoder.slot_query"), rows), nn::repeat_rows(t, source, S));
    for (int l = 0; l < config_.decoder_layers; ++l) {
      x = nn::apply_decoder_layer(c, "decoder.layer" + std::to_string(l), x, memory, rows, config_.decoder_heads);
    }
    return nn::slot_logits(t, x, c.p("decoder.head.weight"), c.p("decoder.head.bias"), config_.ranges());
  }

  ModelConfig config_;
  nn::ParameterStore<T> store_;
  std::mt19937_64 init_rng_;
  std::mt19937_64 dropout_rng_;
};

// ---------------------------------------------------------------------------
// Checkpoints
//   "PDCK" | u32 version | u32 config_len | config JSON |
//   u32 tensor_count | { u16 name_len | name | u32 rows | u32 cols | rows*cols f32 }

inline constexpr std::array<char, 4> kCheckpointMagic = {'P', 'D', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, const DynamicsModel<T>& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(kCheckpointMagic.data(), 4);
  detail::put_u32(out, kCheckpointVersion);
  const std::string cfg = model.config().to_json().dump();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto params = model.parameters().parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::put_u16(out, static_cast<std::uint16_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.cols()));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) detail::put_f32(out, static_cast<float>(p->value.data()[i]));
  }
  out.close();
  if (!out) throw IoError("write failed: " + path);
}

struct CheckpointData {
  ModelConfig config;
  std::vector<std::pair<std::string, Matrix<float>>> tensors;
};

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kCheckpointMagic) throw ValidationError(path + ": not a checkpoint");
  const auto version = detail::get_u32(in);
  if (version != kCheckpointVersion) throw ValidationError(path + ": unsupported checkpoint version");
  const auto len = detail::get_u32(in);
  std::string cfg(len, '\0');
  in.read(cfg.data(), len);
  CheckpointData d;
  d.config = ModelConfig::from_json(json::parse(cfg));
  const auto n = detail::get_u32(in);
  for (std::uint32_t i = 0; i < n && in; ++i) {
    const auto nl = detail::get_u16(in);
    std::string name(nl, '\0');
    in.read(name.data(), nl);
    const auto rows = detail::get_u32(in), cols = detail::get_u32(in);
    Matrix<float> m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = detail::get_f32(in);
    d.tensors.emplace_back(std::move(name), std::move(m));
  }
  if (!in) throw ValidationError(path + ": truncated checkpoint");
  return d;
}

// Verifies architecture compatibility, then assigns every stored tensor by name.
template <class T>
void load_parameters(const CheckpointData& ckpt, DynamicsModel<T>& model) {
  if (ckpt.config.architecture_json() != model.config().architecture_json()) {
    throw ValidationError("checkpoint config is incompatible with the model: checkpoint " +
                          ckpt.config.architecture_json().dump() + " vs model " +
                          model.config().architecture_json().dump());
  }
  auto& store = model.parameters();
  for (const auto& [name, m] : ckpt.tensors) {
    if (!store.contains(name)) throw ValidationError("checkpoint tensor " + name + " has no model parameter");
    auto& p = store.at(name);
    if (p.value.rows() != m.rows() || p.value.cols() != m.cols()) {
      throw ValidationError("checkpoint tensor " + name + " has shape " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()));
    }
  }
  for (const auto& [name, m] : ckpt.tensors) store.at(name).value = m.template cast<T>();
}

template <class T>
DynamicsModel<T> load_model(const std::string& path) {
  auto ckpt = read_checkpoint(path);
  DynamicsModel<T> model(ckpt.config, 0);
  load_parameters(ckpt, model);
  return model;
}

}  // namespace physdyn
