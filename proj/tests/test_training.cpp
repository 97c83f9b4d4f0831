#include <gtest/gtest.h>

#include <iostream>
#include <random>

#include "physdyn/pipeline.hpp"
#include "physdyn/training.hpp"
#include "test_support.hpp"

namespace physdyn {
namespace {

using testing::TempDir;
using testing::tiny_config;
using testing::tiny_schema;

struct TinyData {
  AttributeSchema schema = tiny_schema();
  std::vector<TrajectoryRecord> train, val;
  FeatureStore features;

  explicit TinyData(std::size_t n_train = 8, std::size_t n_val = 4, std::uint64_t seed = 1) {
    std::mt19937_64 rng(seed);
    auto all = testing::random_records(rng, schema, n_train + n_val);
    features = testing::random_features(rng, schema, all, 3, 5, 6);
    train.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
    val.assign(all.begin() + static_cast<std::ptrdiff_t>(n_train), all.end());
  }
  Dataset train_set() const { return Dataset::of(train, &schema, &features); }
  Dataset val_set() const { return Dataset::of(val, &schema, &features); }
};

TrainConfig quick(Phase phase, int epochs, std::uint64_t seed = 1) {
  auto c = TrainConfig::paper(phase);
  c.epochs = epochs;
  c.batch_size = 4;
  c.learning_rate = 1e-2;
  c.seed = seed;
  return c;
}

TEST(TrainConfig, FullScaleDefaults) {
  const auto pre = TrainConfig::paper(Phase::kPretrain);
  const auto ft = TrainConfig::paper(Phase::kFinetune);
  EXPECT_EQ(pre.epochs, 80);
  EXPECT_EQ(ft.epochs, 60);
  EXPECT_DOUBLE_EQ(pre.learning_rate, 1e-3);
  EXPECT_DOUBLE_EQ(ft.learning_rate, 1e-5);
  EXPECT_EQ(pre.batch_size, 256);
  EXPECT_EQ(pre.patience, 10);
  EXPECT_EQ(pre.grad_clip, 0.0);
  EXPECT_EQ(pre.weight_decay, 0.0);
}

TEST(TrainConfig, RejectsInvalidValues) {
  auto bad = [](auto edit) {
    auto c = TrainConfig::paper(Phase::kPretrain);
    edit(c);
    return c;
  };
  EXPECT_THROW(bad([](auto& c) { c.batch_size = 0; }).validate(), ValidationError);
  EXPECT_THROW(bad([](auto& c) { c.patience = 0; }).validate(), ValidationError);
  EXPECT_THROW(bad([](auto& c) { c.learning_rate = 0; }).validate(), ValidationError);
  EXPECT_THROW(bad([](auto& c) { c.epochs = -1; }).validate(), ValidationError);
  EXPECT_THROW(bad([](auto& c) { c.grad_clip = 1.0; }).validate(), ValidationError);
}

TEST(EarlyStopping, StopsAfterPatienceStaleEpochs) {
  EarlyStopping s(2);
  EXPECT_TRUE(s.update(1.0));
  EXPECT_FALSE(s.update(1.0));  // equal is not an improvement
  EXPECT_FALSE(s.should_stop());
  EXPECT_TRUE(s.update(0.5));
  EXPECT_FALSE(s.update(0.7));
  EXPECT_FALSE(s.update(0.6));
  EXPECT_FALSE(s.should_stop());
  EXPECT_FALSE(s.update(0.5));
  EXPECT_TRUE(s.should_stop());
  EXPECT_EQ(s.best(), 0.5);
}

TEST(Training, PatienceOneStopsAtEpochThreeWithEpochOneWeights) {
  TinyData d;
  auto cfg = quick(Phase::kPretrain, 10);
  cfg.patience = 1;
  std::uint64_t epoch1_hash = 0;
  TrainHooks hooks;
  hooks.val_loss_override = [](int epoch, double) { return epoch == 1 ? 1.0 : 1.0 + epoch; };
  // Replay the same run for one epoch to learn the epoch-1 parameters.
  auto one = cfg;
  one.epochs = 1;
  epoch1_hash = parameter_hash(run_pretraining<float>(tiny_config(Setup::kBaseSymbolic, d.schema), d.train_set(),
                                                      d.val_set(), one)
                                   .model.parameters());
  auto r = run_pretraining<float>(tiny_config(Setup::kBaseSymbolic, d.schema), d.train_set(), d.val_set(), cfg, hooks);
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.best_epoch, 1);
  EXPECT_TRUE(r.stopped_early);
  EXPECT_EQ(parameter_hash(r.model.parameters()), epoch1_hash);
}

TEST(Training, OverfitsEightRecords) {
  TinyData d(8, 1);
  auto cfg = quick(Phase::kPretrain, 200);
  cfg.batch_size = 8;
  cfg.patience = 1000;
  auto c = tiny_config(Setup::kBaseSymbolic, d.schema, 16, 32);
  auto r = run_pretraining<float>(c, d.train_set(), d.train_set(), cfg);
  EXPECT_LT(r.history.back().train_loss, 0.01);
}

TEST(Training, SameSeedSameHistoryAndHashes) {
  TinyData d;
  auto c = tiny_config(Setup::kBaseSymbolicImages, d.schema);
  c.dropout = 0.1;
  auto cfg = quick(Phase::kPretrain, 4, 3);
  auto a = run_pretraining<float>(c, d.train_set(), d.val_set(), cfg);
  auto b = run_pretraining<float>(c, d.train_set(), d.val_set(), cfg);
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
    EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
  }
  EXPECT_EQ(parameter_hash(a.model.parameters()), parameter_hash(b.model.parameters()));
  auto other = run_pretraining<float>(c, d.train_set(), d.val_set(), quick(Phase::kPretrain, 4, 4));
  EXPECT_NE(parameter_hash(a.model.parameters()), parameter_hash(other.model.parameters()));
}

TEST(Training, EmptyDatasetsAreRejected) {
  TinyData d;
  Dataset empty{{}, &d.schema, &d.features};
  auto c = tiny_config(Setup::kBaseSymbolic, d.schema);
  EXPECT_THROW(run_pretraining<float>(c, empty, d.val_set(), quick(Phase::kPretrain, 1)), ValidationError);
  EXPECT_THROW(run_pretraining<float>(c, d.train_set(), empty, quick(Phase::kPretrain, 1)), ValidationError);
  EXPECT_THROW(run_pretraining<float>(c, d.train_set(), d.val_set(), quick(Phase::kFinetune, 1)), ValidationError);
}

TEST(Training, ZeroEpochFinetuneOnlyAddsTextProjection) {
  TinyData d;
  DynamicsModel<float> pre(tiny_config(Setup::kBaseImages, d.schema), 5);
  auto r = run_finetuning(pre, d.train_set(), d.val_set(), quick(Phase::kFinetune, 0));
  EXPECT_TRUE(r.history.empty());
  EXPECT_EQ(r.best_epoch, 0);
  const auto& out = r.model.parameters();
  std::size_t new_tensors = 0;
  for (const auto* p : out.parameters()) {
    if (pre.parameters().contains(p->name)) {
      EXPECT_EQ(p->value, pre.parameters().at(p->name).value) << p->name;
    } else {
      EXPECT_EQ(p->name.rfind("action_encoder.text.proj", 0), 0u) << p->name;
      ++new_tensors;
    }
  }
  EXPECT_EQ(new_tensors, 2u);
  EXPECT_EQ(r.model.config().action_input, ActionInput::kText);
}

TEST(Training, FinetuneFromCheckpointChecksArchitecture) {
  TempDir dir;
  TinyData d;
  DynamicsModel<float> pre(tiny_config(Setup::kBaseSymbolic, d.schema), 5);
  save_checkpoint(dir.file("pre.pdck"), pre);
  auto ok = run_finetuning<float>(dir.file("pre.pdck"), d.train_set(), d.val_set(), quick(Phase::kFinetune, 1),
                                  pre.config());
  EXPECT_EQ(ok.history.size(), 1u);
  EXPECT_THROW(run_finetuning<float>(dir.file("pre.pdck"), d.train_set(), d.val_set(), quick(Phase::kFinetune, 1),
                                     tiny_config(Setup::kBaseSymbolic, d.schema, 8, 8)),
               ValidationError);
}

TEST(Training, SingleRepeatedExampleHasNonIncreasingSmoothedLoss) {
  TinyData d(1, 1);
  std::vector<TrajectoryRecord> repeated(8, d.train[0]);
  for (std::size_t i = 0; i < repeated.size(); ++i) repeated[i].id = "copy" + std::to_string(i);
  auto cfg = quick(Phase::kPretrain, 60);
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 8;
  cfg.patience = 1000;
  auto r = run_pretraining<double>(tiny_config(Setup::kBaseSymbolic, d.schema, 8, 16),
                                   Dataset::of(repeated, &d.schema, &d.features), d.val_set(), cfg);
  std::vector<double> smooth;
  for (std::size_t i = 4; i < r.history.size(); ++i) {
    double s = 0;
    for (std::size_t k = i - 4; k <= i; ++k) s += r.history[k].train_loss;
    smooth.push_back(s / 5);
  }
  for (std::size_t i = 1; i < smooth.size(); ++i) EXPECT_LE(smooth[i], smooth[i - 1]) << "window " << i;
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Training, CheckpointRoundTripGivesBitIdenticalMetrics) {
  TempDir dir;
  TinyData d(8, 8);
  auto r = run_pretraining<float>(tiny_config(Setup::kBaseSymbolicImages, d.schema), d.train_set(), d.val_set(),
                                  quick(Phase::kPretrain, 3));
  save_checkpoint(dir.file("m.pdck"), r.model);
  auto back = load_model<float>(dir.file("m.pdck"));
  const auto a = evaluate_model(r.model, pointers(d.val), d.schema, &d.features, {}, 1, 4);
  const auto b = evaluate_model(back, pointers(d.val), d.schema, &d.features, {}, 1, 4);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  EXPECT_EQ(parameter_hash(r.model.parameters()), parameter_hash(back.parameters()));
}

TEST(Training, HistoryCsvRoundTrip) {
  TempDir dir;
  std::vector<EpochRecord> h{{1, 2.5, 2.25, 1e-3, 0.5}, {2, 1.125, 1.0625, 1e-3, 0.25}};
  write_history_csv(dir.file("h.csv"), h);
  const auto back = read_history_csv(dir.file("h.csv"));
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < h.size(); ++i) {
    EXPECT_EQ(back[i].epoch, h[i].epoch);
    EXPECT_DOUBLE_EQ(back[i].train_loss, h[i].train_loss);
    EXPECT_DOUBLE_EQ(back[i].val_loss, h[i].val_loss);
    EXPECT_DOUBLE_EQ(back[i].lr, h[i].lr);
  }
  EXPECT_THROW(read_history_csv(dir.file("none.csv")), IoError);
}

TEST(Training, GitBlobHashMatchesGit) {
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

// Small end-to-end comparison: a pre-trained model fine-tuned on sentences
// against the same architecture trained on the sentences alone.
TEST(Training, PretrainingHelpsFinetuning) {
  auto p = Profile::desk();
  p.pretrain_pool = 2000;
  p.finetune_pool = 400;
  p.finetune_train = 100;
  p.finetune_val = 50;
  p.finetune_test = 150;
  p.pretrain_epochs = 8;
  p.finetune_epochs = 10;
  p.excluded_objects.clear();
  p.excluded_pairs.clear();
  double pretrained_sum = 0, scratch_sum = 0;
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto d = build_desk_data(p, seed);
    const auto run = run_setup(d, p, Setup::kBaseSymbolic, seed);
    DynamicsModel<float> fresh(p.model_config(Setup::kBaseSymbolic, d.schema), seed);
    auto ft = run_finetuning(fresh, Dataset::of(d.finetune_train, &d.schema, &d.features),
                             Dataset::of(d.finetune_val, &d.schema, &d.features),
                             p.train_config(Phase::kFinetune, seed));
    const auto scratch = evaluate_model(ft.model, pointers(d.finetune_test), d.schema, &d.features, {}, seed, 32);
    pretrained_sum += run.report.overall_accuracy;
    scratch_sum += scratch.overall_accuracy;
    wins += run.report.overall_accuracy > scratch.overall_accuracy;
    std::cout << "seed " << seed << ": pretrained " << run.report.overall_accuracy << " scratch "
              << scratch.overall_accuracy << "\n";
  }
  EXPECT_EQ(wins, 3);
  EXPECT_GT(pretrained_sum, scratch_sum);
}

}  // namespace
}  // namespace physdyn
