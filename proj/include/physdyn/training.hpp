#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "physdyn/errors.hpp"
#include "physdyn/feature_cache.hpp"
#include "physdyn/model.hpp"
#include "physdyn/schema.hpp"

namespace physdyn {

enum class Phase { kPretrain, kFinetune };

inline std::string phase_name(Phase p) { return p == Phase::kPretrain ? "pretrain" : "finetune"; }

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  int epochs = 80;
  int batch_size = 256;
  double learning_rate = 1e-3;
  int patience = 10;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;
  // Neither is used by default; both are recorded in run metadata.
  double grad_clip = 0.0;
  double weight_decay = 0.0;

  static TrainConfig paper(Phase p) {
    TrainConfig c;
    c.phase = p;
    c.epochs = p == Phase::kPretrain ? 80 : 60;
    c.learning_rate = p == Phase::kPretrain ? 1e-3 : 1e-5;
    return c;
  }

  void validate() const {
    if (epochs < 0) throw ValidationError("epochs must be non-negative");
    if (batch_size < 1) throw ValidationError("batch_size must be positive");
    if (patience < 1) throw ValidationError("patience must be positive");
    if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be positive");
    if (grad_clip != 0.0 || weight_decay != 0.0) {
      throw ValidationError("gradient clipping and weight decay are not supported");
    }
  }

  json to_json() const {
    return {{"phase", phase_name(phase)},       {"epochs", epochs},     {"batch_size", batch_size},
            {"learning_rate", learning_rate},   {"patience", patience}, {"seed", seed},
            {"grad_clip", grad_clip},           {"weight_decay", weight_decay}};
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double lr = 0;
  double seconds = 0;
};

// Records plus the feature store and schema their batches are built from.
struct Dataset {
  std::vector<const TrajectoryRecord*> records;
  const AttributeSchema* schema = nullptr;
  const FeatureStore* features = nullptr;

  static Dataset of(const std::vector<TrajectoryRecord>& rs, const AttributeSchema* schema,
                    const FeatureStore* features) {
    Dataset d{{}, schema, features};
    for (const auto& r : rs) d.records.push_back(&r);
    return d;
  }
  std::size_t size() const { return records.size(); }
};

template <class T>
struct TrainResult {
  DynamicsModel<T> model;  // best-validation parameters
  std::vector<EpochRecord> history;
  int best_epoch = 0;  // 0 when no epoch ran
  bool stopped_early = false;
};

struct TrainHooks {
  // Replaces the measured validation loss of an epoch (1-based) when set.
  std::function<double(int epoch, double measured)> val_loss_override;
  std::function<void(const EpochRecord&)> on_epoch;
};

// Consecutive-epoch early stopping on strictly decreasing validation loss.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}
  // Returns true when this epoch is a new best.
  bool update(double val_loss) {
    if (!best_ || val_loss < *best_) {
      best_ = val_loss;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }
  bool should_stop() const { return stale_ > patience_; }
  std::optional<double> best() const { return best_; }

 private:
  int patience_;
  int stale_ = 0;
  std::optional<double> best_;
};

namespace detail {

template <class T>
double dataset_loss(DynamicsModel<T>& model, const Dataset& data, int batch_size) {
  double total = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(data.size(), i + static_cast<std::size_t>(batch_size));
    std::vector<const TrajectoryRecord*> chunk(data.records.begin() + static_cast<std::ptrdiff_t>(i),
                                               data.records.begin() + static_cast<std::ptrdiff_t>(end));
    auto batch = make_batch<T>(chunk, model.config(), data.schema, data.features);
    total += static_cast<double>(model.evaluate_loss(batch)) * static_cast<double>(chunk.size());
    n += chunk.size();
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

}  // namespace detail

// Adam over shuffled mini-batches with one validation pass per epoch.
template <class T>
TrainResult<T> train_loop(DynamicsModel<T> model, const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                          const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train.size() == 0) throw ValidationError("training set is empty");
  if (val.size() == 0) throw ValidationError("validation set is empty");
  model.reseed_dropout(cfg.seed);
  nn::Adam<T> opt(model.parameters(), cfg.learning_rate);
  EarlyStopping stopper(cfg.patience);
  TrainResult<T> result{model, {}, 0, false};
  std::vector<const TrajectoryRecord*> order = train.records;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 shuffle_rng(seq);
    order = train.records;
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg.batch_size)) {
      const auto end = std::min(order.size(), i + static_cast<std::size_t>(cfg.batch_size));
      std::vector<const TrajectoryRecord*> chunk(order.begin() + static_cast<std::ptrdiff_t>(i),
                                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      auto batch = make_batch<T>(chunk, model.config(), train.schema, train.features);
      nn::Tape<T> tape;
      auto g = model.forward(tape, batch, true);
      Var loss = model.loss(tape, g, batch);
      tape.backward(loss);
      opt.step();
      model.parameters().zero_grad();
      loss_sum += static_cast<double>(tape.value(loss)(0, 0)) * static_cast<double>(chunk.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = detail::dataset_loss(model, val, cfg.batch_size);
    if (hooks.val_loss_override) rec.val_loss = hooks.val_loss_override(epoch, rec.val_loss);
    rec.lr = cfg.learning_rate;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    if (stopper.update(rec.val_loss)) {
      result.model.parameters() = model.parameters();
      result.best_epoch = epoch;
    }
    if (stopper.should_stop()) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  if (result.best_epoch == 0) result.model = model;
  return result;
}

template <class T>
TrainResult<T> run_pretraining(const ModelConfig& model_config, const Dataset& train, const Dataset& val,
                               const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  if (cfg.phase != Phase::kPretrain) throw ValidationError("run_pretraining needs a pretrain config");
  if (model_config.action_input != ActionInput::kSymbolic) {
    throw ValidationError("pre-training uses symbolic actions");
  }
  DynamicsModel<T> model(model_config, cfg.seed);
  return train_loop(std::move(model), train, val, cfg, hooks);
}

// Swaps the action encoder for the text projection (fresh parameters) and
// continues training every weight on annotated records.
template <class T>
TrainResult<T> run_finetuning(const DynamicsModel<T>& pretrained, const Dataset& train, const Dataset& val,
                              const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  if (cfg.phase != Phase::kFinetune) throw ValidationError("run_finetuning needs a finetune config");
  const FeatureStore* fs = train.features;
  if (!fs || !fs->has_text()) throw ValidationError("fine-tuning needs cached action text embeddings");
  DynamicsModel<T> model = pretrained;
  model.use_text_actions(fs->text_dim(), cfg.seed ^ 0x7E47);
  return train_loop(std::move(model), train, val, cfg, hooks);
}

// Variant taking a checkpoint; the stored architecture must match `expected`
// when given.
template <class T>
TrainResult<T> run_finetuning(const std::string& checkpoint, const Dataset& train, const Dataset& val,
                              const TrainConfig& cfg, const std::optional<ModelConfig>& expected = {},
                              const TrainHooks& hooks = {}) {
  auto ckpt = read_checkpoint(checkpoint);
  if (expected && expected->architecture_json() != ckpt.config.architecture_json()) {
    throw ValidationError("checkpoint config does not match the requested model config");
  }
  DynamicsModel<T> model(ckpt.config, cfg.seed);
  load_parameters(ckpt, model);
  return run_finetuning(model, train, val, cfg, hooks);
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,train_loss,val_loss,lr,seconds\n";
  out << std::setprecision(9);
  for (const auto& r : history) {
    out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.lr << ',' << std::setprecision(4)
        << r.seconds << std::setprecision(9) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<EpochRecord> read_history_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    EpochRecord r;
    char comma;
    ss >> r.epoch >> comma >> r.train_loss >> comma >> r.val_loss >> comma >> r.lr >> comma >> r.seconds;
    if (!ss) throw ValidationError(path + ": malformed history row '" + line + "'");
    out.push_back(r);
  }
  return out;
}

// Stable content hash of all parameter values, for seed-isolation checks.
template <class T>
std::uint64_t parameter_hash(const nn::ParameterStore<T>& store) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : store.parameters()) {
    for (unsigned char c : p->name) h = (h ^ c) * 0x100000001b3ULL;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const float f = static_cast<float>(p->value.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      h = (h ^ bits) * 0x100000001b3ULL;
    }
  }
  return h;
}

// Hex SHA-1 of "blob <size>\0<content>", as git computes for file contents.
inline std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, header.data(), header.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("SHA-1 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 15]);
  }
  return out;
}

inline std::string file_sha1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return git_blob_sha1(ss.str());
}

}  // namespace physdyn
