#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "physdyn/model.hpp"
#include "physdyn/nn/layers.hpp"
#include "physdyn/synthetic_world.hpp"
#include "test_support.hpp"

namespace physdyn {
namespace {

using testing::TempDir;
using testing::tiny_config;
using testing::tiny_schema;
using MatD = nn::Matrix<double>;

// --- autograd operations -----------------------------------------------------------

using OpFn = std::function<Var(nn::Tape<double>&, const std::vector<Var>&)>;

// Projects the op output onto a fixed random direction so any output shape
// reduces to a scalar, then compares the analytic gradient of every input
// with central differences. Returns the worst relative error.
double op_gradient_error(std::vector<MatD> inputs, const OpFn& op, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  nn::ParameterStore<double> store;
  for (std::size_t i = 0; i < inputs.size(); ++i) store.add("x" + std::to_string(i), inputs[i]);
  MatD direction;
  auto scalar = [&](bool record) {
    nn::Tape<double> t(record);
    std::vector<Var> vars;
    for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(t.param(store.at("x" + std::to_string(i))));
    Var out = op(t, vars);
    const auto& value = t.value(out);
    if (direction.size() == 0) direction = nn::normal_matrix<double>(value.rows(), value.cols(), 1.0, rng);
    MatD s(1, 1);
    s(0, 0) = (value.array() * direction.array()).sum();
    Var loss = t.emit(s, {out}, [out, d = direction](nn::Tape<double>& t, Var self) {
      t.grad(out) += t.grad(self)(0, 0) * d;
    });
    if (record) t.backward(loss);
    return s(0, 0);
  };
  store.zero_grad();
  scalar(true);
  double worst = 0;
  const double eps = 1e-6;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& p = store.at("x" + std::to_string(i));
    MatD numeric(p.value.rows(), p.value.cols());
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double keep = p.value.data()[k];
      p.value.data()[k] = keep + eps;
      const double up = scalar(false);
      p.value.data()[k] = keep - eps;
      const double down = scalar(false);
      p.value.data()[k] = keep;
      numeric.data()[k] = (up - down) / (2 * eps);
    }
    const double denom = std::max({p.grad.norm(), numeric.norm(), 1e-8});
    worst = std::max(worst, (p.grad - numeric).norm() / denom);
  }
  return worst;
}

MatD rand_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) { return nn::normal_matrix<double>(r, c, 1.0, rng); }

TEST(Autograd, ElementaryOpsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  EXPECT_LT(op_gradient_error({rand_mat(rng, 3, 4), rand_mat(rng, 4, 2)},
                              [](auto& t, const auto& v) { return nn::matmul(t, v[0], v[1]); }),
            1e-7);
  EXPECT_LT(op_gradient_error({rand_mat(rng, 3, 4), rand_mat(rng, 4, 5), rand_mat(rng, 1, 5)},
                              [](auto& t, const auto& v) { return nn::linear(t, v[0], v[1], v[2]); }),
            1e-7);
  EXPECT_LT(op_gradient_error({rand_mat(rng, 3, 4)}, [](auto& t, const auto& v) { return nn::tanh(t, v[0]); }), 1e-7);
  EXPECT_LT(op_gradient_error({rand_mat(rng, 3, 4), rand_mat(rng, 1, 4), rand_mat(rng, 1, 4)},
                              [](auto& t, const auto& v) { return nn::layer_norm(t, v[0], v[1], v[2]); }),
            1e-6);
  EXPECT_LT(op_gradient_error({rand_mat(rng, 4, 3)},
                              [](auto& t, const auto& v) { return nn::gather_rows(t, v[0], {2, 0, 2, 3}); }),
            1e-7);
  EXPECT_LT(op_gradient_error({rand_mat(rng, 2, 3), rand_mat(rng, 2, 2)},
                              [](auto& t, const auto& v) {
                                return nn::concat_cols(t, nn::repeat_rows(t, v[0], 2), nn::tile_rows(t, v[1], 2));
                              }),
            1e-7);
}

TEST(Autograd, AttentionMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  // Two sequences, 3 queries and 4 keys each, 2 heads of width 2.
  EXPECT_LT(op_gradient_error({rand_mat(rng, 6, 4), rand_mat(rng, 8, 4), rand_mat(rng, 8, 4)},
                              [](auto& t, const auto& v) { return nn::attention(t, v[0], v[1], v[2], 2, 2); }),
            1e-6);
}

TEST(Autograd, BoxAttentionMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  const MatD boxes = rand_mat(rng, 6, 5);
  EXPECT_LT(op_gradient_error({rand_mat(rng, 4, 3), rand_mat(rng, 6, 3)},
                              [&](auto& t, const auto& v) {
                                return nn::box_attention(t, v[0], v[1], boxes, 3, {0, 0, 1, 1});
                              }),
            1e-6);
}

TEST(Autograd, SlotCrossEntropyMatchesNaiveOracle) {
  std::mt19937_64 rng(10);
  const std::vector<nn::SlotRange> ranges{{0, 3}, {3, 2}, {5, 4}};
  const MatD logits = rand_mat(rng, 2, 9);
  const std::vector<int> targets{1, 4, 8, 0, 3, 5};
  const std::vector<double> weights{0.5, 1.0, 0.0, 2.0, 1.0, 0.25};
  nn::Tape<double> t(false);
  const double value = t.value(nn::slot_cross_entropy(t, t.constant(logits), ranges, targets, weights))(0, 0);
  double expect = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto& rg = ranges[r % 3];
    const auto row = static_cast<Eigen::Index>(r / 3);
    double z = 0;
    for (int k = 0; k < rg.size; ++k) z += std::exp(logits(row, rg.offset + k));
    expect += weights[r] * (std::log(z) - logits(row, targets[r]));
  }
  EXPECT_NEAR(value, expect, 1e-12);
  EXPECT_LT(op_gradient_error({logits},
                              [&](auto& t, const auto& v) {
                                return nn::slot_cross_entropy(t, v[0], ranges, targets, weights);
                              }),
            1e-7);
  nn::Tape<double> t2(false);
  EXPECT_THROW(nn::slot_cross_entropy(t2, t2.constant(logits), ranges, {1, 1, 8, 0, 3, 5}, weights), ValidationError);
}

TEST(Autograd, ShapeErrorsAreReported) {
  nn::Tape<double> t;
  Var a = t.constant(MatD::Zero(3, 4));
  Var b = t.constant(MatD::Zero(5, 4));
  EXPECT_THROW(nn::attention(t, a, b, b, 2, 2), ValidationError);
  EXPECT_THROW(nn::attention(t, a, b, b, 1, 3), ValidationError);
  EXPECT_THROW(nn::box_attention(t, a, b, MatD(MatD::Zero(5, 2)), 5, {0, 0}), ValidationError);
  EXPECT_THROW(t.backward(a), ValidationError);
}

TEST(Autograd, AdamFirstStepMovesByLearningRateAgainstGradientSign) {
  nn::ParameterStore<double> store;
  auto& p = store.add("w", MatD::Constant(1, 3, 1.0));
  p.grad << 0.5, -2.0, 0.0;
  nn::Adam<double> adam(store, 0.01);
  adam.step();
  EXPECT_NEAR(p.value(0, 0), 0.99, 1e-6);
  EXPECT_NEAR(p.value(0, 1), 1.01, 1e-6);
  EXPECT_DOUBLE_EQ(p.value(0, 2), 1.0);
  EXPECT_EQ(adam.steps(), 1);
}

TEST(Autograd, ParameterStoreRejectsDuplicatesAndCopiesDeeply) {
  nn::ParameterStore<float> s;
  s.add("a", nn::Matrix<float>::Ones(2, 2));
  EXPECT_THROW(s.add("a", nn::Matrix<float>::Ones(1, 1)), ValidationError);
  auto copy = s;
  copy.at("a").value(0, 0) = 5;
  EXPECT_EQ(s.at("a").value(0, 0), 1.0f);
  EXPECT_EQ(s.count(), 4u);
}

// --- model -----------------------------------------------------------------------

ModelConfig default_config(Setup s) {
  auto c = ModelConfig::for_setup(s, ModelConfig::sizes_of(make_synthetic_schema(20)));
  if (c.use_images) {
    c.n_boxes = 10;
    c.box_dim = 64;
  }
  if (c.use_text_labels) c.text_embed_dim = 64;
  return c;
}

TEST(Model, DefaultModelsStayUnderTwoMillionParameters) {
  for (auto s : kAllSetups) {
    DynamicsModel<float> m(default_config(s), 1);
    EXPECT_LT(m.parameter_count(), 2'000'000u) << setup_name(s);
    EXPECT_GT(m.parameter_count(), 100'000u) << setup_name(s);
  }
  EXPECT_EQ(ModelConfig{}.hidden_size, 64);
  EXPECT_EQ(ModelConfig{}.feedforward_size, 2048);
}

TEST(Model, VisionEncoderIsPermutationInvariant) {
  DynamicsModel<float> m(default_config(Setup::kBaseImages), 3);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 12);
    nn::Matrix<float> boxes = nn::normal_matrix<float>(n, 64, 1.0, rng);
    const int name = 1 + static_cast<int>(rng() % 20);
    auto [h, alpha] = m.encode_vision_object(boxes, name);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    nn::Matrix<float> permuted(n, 64);
    for (int i = 0; i < n; ++i) permuted.row(i) = boxes.row(perm[static_cast<std::size_t>(i)]);
    auto [h2, alpha2] = m.encode_vision_object(permuted, name);
    EXPECT_LT((h - h2).cwiseAbs().maxCoeff(), 1e-6f) << "trial " << trial;
    EXPECT_NEAR(alpha.sum(), 1.0f, 1e-5f);
    for (int i = 0; i < n; ++i) {
      EXPECT_NEAR(alpha2(0, i), alpha(0, perm[static_cast<std::size_t>(i)]), 1e-6f);
    }
  }
}

TEST(Model, SingleBoxGetsAllAttention) {
  DynamicsModel<double> m(default_config(Setup::kBaseImages), 3);
  MatD box = MatD::Random(1, 64);
  auto [h, alpha] = m.encode_vision_object(box, 2);
  EXPECT_DOUBLE_EQ(alpha(0, 0), 1.0);
  EXPECT_THROW(m.encode_vision_object(MatD::Random(3, 10), 2), ValidationError);
  DynamicsModel<double> text(default_config(Setup::kBaseImagesTextLabels), 3);
  EXPECT_THROW(text.encode_vision_object(box, 2), ValidationError);
}

TEST(Model, ConfigValidationAndJsonRoundTrip) {
  for (auto s : kAllSetups) {
    EXPECT_EQ(parse_setup(setup_name(s)), s);
    auto c = default_config(s);
    EXPECT_EQ(ModelConfig::from_json(c.to_json()).to_json(), c.to_json());
    EXPECT_EQ(c.setup(), s);
  }
  EXPECT_THROW(parse_setup("base+audio"), ValidationError);
  auto c = default_config(Setup::kBase);
  c.hidden_size = 30;
  EXPECT_THROW(c.validate(), ValidationError);
  c = default_config(Setup::kBaseImages);
  c.n_boxes = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = default_config(Setup::kBase);
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Model, EachSetupReadsExactlyItsInputs) {
  const auto schema = tiny_schema();
  std::mt19937_64 rng(2);
  auto records = testing::random_records(rng, schema, 3);
  auto fs = testing::random_features(rng, schema, records, 3, 5, 6);
  const auto ptrs = pointers(records);
  for (auto s : kAllSetups) {
    DynamicsModel<double> m(tiny_config(s, schema), 1);
    // Offer every field this config can assemble, not only the ones it reads.
    unsigned all = kFieldObjectNames | kFieldSymbolicStates | kFieldSymbolicAction;
    if (m.config().use_images) all |= kFieldBoxesPre | kFieldBoxesPost;
    if (m.config().text_embed_dim > 0) all |= kFieldLabelText | kFieldActionText;
    auto batch = make_batch<double>(ptrs, m.config(), &schema, &fs, all);
    m.predict(batch);
    EXPECT_EQ(batch.accessed(), required_fields(m.config())) << setup_name(s);
    EXPECT_EQ(batch.accessed() & kFieldSymbolicStates, s == Setup::kBaseSymbolic || s == Setup::kBaseSymbolicImages
                                                           ? unsigned{kFieldSymbolicStates}
                                                           : 0u);
    auto missing = make_batch<double>(ptrs, m.config(), &schema, &fs, 0u);
    EXPECT_THROW(m.predict(missing), ValidationError) << setup_name(s);
  }
}

TEST(Model, PredictionsStayInsideEachSlotVocabulary) {
  const auto schema = tiny_schema(5, 3);
  std::mt19937_64 rng(4);
  auto records = testing::random_records(rng, schema, 4);
  auto fs = testing::random_features(rng, schema, records, 3, 5, 6);
  DynamicsModel<double> m(tiny_config(Setup::kBaseSymbolicImages, schema), 2);
  auto batch = make_batch<double>(pointers(records), m.config(), &schema, &fs);
  const auto p = m.predict(batch);
  ASSERT_EQ(p.objects, 8);
  ASSERT_EQ(p.post.size(), 8u * kNumAttributes);
  for (std::size_t r = 0; r < p.post.size(); ++r) {
    const auto size = static_cast<int>(schema.vocabulary_size(r % kNumAttributes));
    EXPECT_GE(p.post[r], 0);
    EXPECT_LT(p.post[r], size);
    EXPECT_LT(p.pre[r], size);
  }
  EXPECT_EQ(p.alpha_pre.rows(), 8);
  EXPECT_EQ(p.alpha_pre.cols(), 3);
  for (Eigen::Index i = 0; i < 8; ++i) EXPECT_NEAR(p.alpha_post.row(i).sum(), 1.0, 1e-12);
}

TEST(Model, DecoderMasksOtherSlotsAndLossMatchesOracle) {
  const auto schema = tiny_schema(4, 3);
  DynamicsModel<double> m(tiny_config(Setup::kBaseSymbolic, schema), 6);
  std::mt19937_64 rng(6);
  const MatD mem = rand_mat(rng, 1, 4), src = rand_mat(rng, 1, 4);
  const MatD L = m.decode_object(mem, src);
  ASSERT_EQ(L.rows(), static_cast<Eigen::Index>(kNumAttributes));
  const auto ranges = m.config().ranges();
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    for (Eigen::Index v = 0; v < L.cols(); ++v) {
      const auto& rg = ranges[static_cast<std::size_t>(i)];
      EXPECT_EQ(std::isinf(L(i, v)), v < rg.offset || v >= rg.offset + rg.size);
    }
  }
  std::vector<int> post(kNumAttributes), pre(kNumAttributes);
  for (std::size_t i = 0; i < kNumAttributes; ++i) {
    post[i] = static_cast<int>(rng() % schema.vocabulary_size(i));
    pre[i] = static_cast<int>(rng() % schema.vocabulary_size(i));
  }
  auto naive = [&](const std::vector<int>& tgt) {
    double s = 0;
    for (std::size_t i = 0; i < tgt.size(); ++i) {
      const auto& rg = ranges[i];
      double z = 0;
      for (int k = 0; k < rg.size; ++k) z += std::exp(L(static_cast<Eigen::Index>(i), rg.offset + k));
      s += std::log(z) - L(static_cast<Eigen::Index>(i), rg.offset + tgt[i]);
    }
    return s / static_cast<double>(tgt.size());
  };
  EXPECT_NEAR(m.compute_loss(L, post, L, pre), naive(post) + naive(pre), 1e-10);
  auto bad = post;
  bad[3] = 7;
  EXPECT_THROW(m.compute_loss(L, bad, L, pre), ValidationError);
}

TEST(Model, CheckpointRoundTripGivesIdenticalPredictions) {
  TempDir dir;
  const auto schema = tiny_schema();
  std::mt19937_64 rng(8);
  auto records = testing::random_records(rng, schema, 5);
  auto fs = testing::random_features(rng, schema, records, 3, 5, 6);
  DynamicsModel<float> m(tiny_config(Setup::kBaseSymbolicImages, schema), 11);
  save_checkpoint(dir.file("m.pdck"), m);
  auto back = load_model<float>(dir.file("m.pdck"));
  auto batch = make_batch<float>(pointers(records), m.config(), &schema, &fs);
  EXPECT_EQ(m.evaluate_loss(batch), back.evaluate_loss(batch));
  const auto a = m.predict(batch), b = back.predict(batch);
  EXPECT_EQ(a.post, b.post);
  EXPECT_EQ(a.alpha_post, b.alpha_post);

  DynamicsModel<float> other(tiny_config(Setup::kBaseSymbolic, schema), 1);
  EXPECT_THROW(load_parameters(read_checkpoint(dir.file("m.pdck")), other), ValidationError);
  EXPECT_THROW(read_checkpoint(dir.file("missing.pdck")), IoError);
  std::filesystem::resize_file(dir.file("m.pdck"), 100);
  EXPECT_THROW(read_checkpoint(dir.file("m.pdck")), std::exception);
}

TEST(Model, NoneObjectsCarryZeroWeight) {
  const auto schema = tiny_schema();
  std::mt19937_64 rng(9);
  auto records = testing::random_records(rng, schema, 2);
  records[0].objects_pre[1].is_none = records[0].objects_post[1].is_none = true;
  DynamicsModel<double> m(tiny_config(Setup::kBaseSymbolic, schema), 1);
  auto batch = make_batch<double>(pointers(records), m.config(), &schema, nullptr);
  EXPECT_EQ(batch.targets().weight, (std::vector<double>{1, 0, 1, 1}));
}

TEST(Model, SameSeedSameWeights) {
  const auto schema = tiny_schema();
  DynamicsModel<float> a(tiny_config(Setup::kBaseImages, schema), 4), b(tiny_config(Setup::kBaseImages, schema), 4),
      c(tiny_config(Setup::kBaseImages, schema), 5);
  bool any_diff = false;
  for (const auto* p : a.parameters().parameters()) {
    EXPECT_EQ(p->value, b.parameters().at(p->name).value);
    any_diff |= p->value != c.parameters().at(p->name).value;
  }
  EXPECT_TRUE(any_diff);
}

}  // namespace
}  // namespace physdyn
