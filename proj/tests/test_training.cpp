#include <gtest/gtest.h>

#include <cmath>

#include "milkit/training.hpp"
#include "test_support.hpp"

namespace milkit {
namespace {

SyntheticSpec bags_spec(std::size_t bags, std::uint64_t seed) {
  SyntheticSpec s;
  s.mode = DataMode::Embeddings;
  s.classes = 3;
  s.dim = 16;
  s.instances = 49;
  s.bags = bags;
  s.key_min = 5;
  s.key_max = 15;
  s.seed = seed;
  return s;
}

SyntheticSpec image_bags_spec(std::size_t bags, std::uint64_t seed) {
  SyntheticSpec s;
  s.mode = DataMode::Images;
  s.classes = 3;
  s.patch = 4;
  s.grid = 5;
  s.bags = bags;
  s.key_min = 3;
  s.key_max = 8;
  s.noise_sigma = 0.05;
  s.background_sigma = 0.15;
  s.seed = seed;
  return s;
}

MilConfig mil(Ordering o, Pooling p, std::size_t classes = 3, std::size_t dim = 16) {
  MilConfig c;
  c.ordering = o;
  c.pooling = p;
  c.k_fraction = 0.25;
  c.classes = classes;
  c.dim = dim;
  return c;
}

TrainConfig train_config(std::size_t epochs, std::uint64_t seed = 5) {
  TrainConfig t;
  t.epochs = epochs;
  t.seed = seed;
  return t;
}

// --- Adam -------------------------------------------------------------------

TEST(AdamStep, ZeroGradientLeavesParametersButAdvancesStep) {
  Tensor p = Tensor::vector({1.0, -2.0, 3.0});
  const Tensor before = p;
  AdamState state;
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor({3})};
  adam_step(params, grads, state, TrainConfig{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(state.t, 1u);
}

TEST(AdamStep, FirstStepMovesByLearningRateAgainstGradientSign) {
  Tensor p = Tensor::vector({0.0, 0.0, 0.0});
  AdamState state;
  Tensor* params[] = {&p};
  const Tensor grads[] = {Tensor::vector({3.0, -0.25, 1e-3})};
  TrainConfig cfg;
  adam_step(params, grads, state, cfg);
  EXPECT_NEAR(p[0], -cfg.learning_rate, 1e-10);
  EXPECT_NEAR(p[1], cfg.learning_rate, 1e-10);
  EXPECT_NEAR(p[2], -cfg.learning_rate, 1e-8);
}

TEST(AdamStep, ThreeStepsOnSquareMatchHandIteration) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  Tensor p = Tensor::vector({1.0});
  AdamState state;
  for (int i = 0; i < 3; ++i) {
    Tensor* params[] = {&p};
    const Tensor grads[] = {Tensor::vector({2.0 * p[0]})};
    adam_step(params, grads, state, cfg);
  }

  long double x = 1.0L, m = 0.0L, v = 0.0L;
  for (int t = 1; t <= 3; ++t) {
    const long double g = 2.0L * x;
    m = 0.9L * m + 0.1L * g;
    v = 0.999L * v + 0.001L * g * g;
    const long double mh = m / (1.0L - std::pow(0.9L, t));
    const long double vh = v / (1.0L - std::pow(0.999L, t));
    x -= 0.1L * mh / (std::sqrt(vh) + 1e-8L);
  }
  EXPECT_NEAR(p[0], static_cast<double>(x), 1e-12);
}

TEST(AdamStep, NonFiniteGradientNamesParameter) {
  Tensor a = Tensor::vector({1.0}), b = Tensor::vector({2.0});
  const Tensor before = a;
  AdamState state;
  Tensor* params[] = {&a, &b};
  const Tensor grads[] = {Tensor::vector({0.5}), Tensor::vector({std::nan("")})};
  const std::string names[] = {"head.w", "head.b"};
  try {
    adam_step(params, grads, state, TrainConfig{}, names);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("head.b"), std::string::npos);
  }
  EXPECT_EQ(a, before);
  EXPECT_EQ(state.t, 0u);
}

// --- fit --------------------------------------------------------------------

TEST(Fit, SameSeedSameModelAndLog) {
  const Dataset train = generate(bags_spec(60, 1));
  const Dataset val = generate(bags_spec(30, 2));
  const auto a = fit(train, val, mil(Ordering::I1, Pooling::TopK), train_config(3));
  const auto b = fit(train, val, mil(Ordering::I1, Pooling::TopK), train_config(3));
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(serialize_checkpoint(a.model), serialize_checkpoint(b.model));
  const auto c = fit(train, val, mil(Ordering::I1, Pooling::TopK), train_config(3, 6));
  EXPECT_NE(a.log, c.log);
}

TEST(Fit, InitialLossIsLogOfClassCount) {
  const Dataset train = generate(bags_spec(60, 1));
  const Dataset val = generate(bags_spec(30, 2));
  const auto r = fit(train, val, mil(Ordering::I2, Pooling::TopK), train_config(1));
  ASSERT_EQ(r.log.size(), 2u);
  EXPECT_EQ(r.log[0].epoch, 0u);
  EXPECT_NEAR(r.log[0].train_loss, std::log(3.0), 0.15 * std::log(3.0));
}

TEST(Fit, TopKInstanceModelSeparatesSyntheticBags) {
  const Dataset train = generate(bags_spec(300, 11));
  const Dataset val = generate(bags_spec(90, 12));
  const auto r = fit(train, val, mil(Ordering::I1, Pooling::TopK), train_config(6));
  EXPECT_GE(r.log[r.best_epoch].val_ba, 0.95);
  EXPECT_EQ(evaluate(r.model, val).ba, r.log[r.best_epoch].val_ba);
  EXPECT_EQ(r.model.epoch, r.best_epoch);
}

TEST(Fit, SingleBagLossDecreasesForEveryOrderingAndPooling) {
  const Dataset ds = generate(bags_spec(3, 21));
  for (Ordering o : {Ordering::I1, Ordering::I2, Ordering::E}) {
    for (Pooling p : {Pooling::Max, Pooling::TopK, Pooling::Average}) {
      RandomStream rng(4);
      Model model = init_model(mil(o, p), std::nullopt, HeadInit::Uniform, rng);
      const ClassWeights w = uniform_weights(3);
      AdamState state;
      std::vector<Tensor> grads;
      double previous = bag_loss(model, ds.bags[1], w);
      for (int step = 0; step < 10; ++step) {
        bag_loss(model, ds.bags[1], w, &grads);
        std::vector<Tensor*> params;
        for (auto& [name, ptr] : model.parameters()) params.push_back(ptr);
        adam_step(params, grads, state, TrainConfig{});
        const double now = bag_loss(model, ds.bags[1], w);
        ASSERT_LT(now, previous) << to_string(o) << "/" << to_string(p) << " step " << step;
        previous = now;
      }
    }
  }
}

TEST(Fit, RejectsModeMismatchAndMissingClass) {
  const Dataset train = generate(bags_spec(30, 1));
  TrainConfig cfg = train_config(1);
  cfg.mode = DataMode::Images;
  EXPECT_THROW(fit(train, train, mil(Ordering::I1, Pooling::Max), cfg, EncoderShape{4, 8}), ValidationError);
  Dataset lopsided = train;
  std::erase_if(lopsided.bags, [](const BagRecord& b) { return b.label == 2; });
  EXPECT_THROW(fit(lopsided, train, mil(Ordering::I1, Pooling::Max), train_config(1)), ValidationError);
}

TEST(Fit, ImageModelTrainsEncoderDeterministically) {
  const Dataset train = generate(image_bags_spec(30, 3));
  const Dataset val = generate(image_bags_spec(15, 4));
  TrainConfig cfg = train_config(2);
  cfg.mode = DataMode::Images;
  const auto a = fit(train, val, mil(Ordering::I2, Pooling::Max, 3, 8), cfg, EncoderShape{4, 16});
  const auto b = fit(train, val, mil(Ordering::I2, Pooling::Max, 3, 8), cfg, EncoderShape{4, 16});
  ASSERT_TRUE(a.model.encoder.has_value());
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.log, b.log);
}

TEST(EpochLog, LineFormat) {
  EXPECT_EQ(epoch_log_line({3, 0.5, 0.25}), "{\"epoch\": 3, \"train_loss\": 0.5, \"val_ba\": 0.25}\n");
}

// --- evaluate ---------------------------------------------------------------

class TrainedModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    train_ = new Dataset(generate(bags_spec(120, 31)));
    val_ = new Dataset(generate(bags_spec(60, 32)));
    model_ = new Model(fit(*train_, *val_, mil(Ordering::I2, Pooling::TopK), train_config(4)).model);
  }
  static void TearDownTestSuite() {
    delete train_;
    delete val_;
    delete model_;
  }
  static Dataset* train_;
  static Dataset* val_;
  static Model* model_;
};
Dataset* TrainedModel::train_ = nullptr;
Dataset* TrainedModel::val_ = nullptr;
Model* TrainedModel::model_ = nullptr;

TEST_F(TrainedModel, EvaluateIsPure) {
  const Model before = *model_;
  const auto first = evaluate(*model_, *val_);
  const auto second = evaluate(*model_, *val_);
  EXPECT_EQ(first.ba, second.ba);
  EXPECT_EQ(first.confusion, second.confusion);
  EXPECT_EQ(*model_, before);
  EXPECT_EQ(confusion(*model_, *val_, 0, val_->bags.size()).total(), val_->bags.size());
}

TEST_F(TrainedModel, PermutingLabelsPermutesRecalls) {
  const std::vector<std::size_t> perm{2, 0, 1};  // old class c becomes perm[c]
  Model relabelled = *model_;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t d = 0; d < 16; ++d) relabelled.head.w.at(perm[c], d) = model_->head.w.at(c, d);
    relabelled.head.b[perm[c]] = model_->head.b[c];
  }
  Dataset val = *val_;
  for (auto& bag : val.bags) bag.label = perm[bag.label];
  const auto original = evaluate(*model_, *val_);
  const auto permuted = evaluate(relabelled, val);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(permuted.recalls[perm[c]], original.recalls[c]);
  EXPECT_NEAR(permuted.ba, original.ba, 1e-15);
}

TEST_F(TrainedModel, ShardedConfusionMergesToFull) {
  ConfusionMatrix merged = confusion(*model_, *val_, 0, 17);
  merged.merge(confusion(*model_, *val_, 17, 40));
  merged.merge(confusion(*model_, *val_, 40, val_->bags.size()));
  EXPECT_EQ(merged, confusion(*model_, *val_, 0, val_->bags.size()));
  EXPECT_EQ(balanced_accuracy(merged), evaluate(*model_, *val_));
}

TEST(Evaluate, OverfitsTenBags) {
  const Dataset ten = generate(bags_spec(10, 41));
  TrainConfig cfg = train_config(40);
  cfg.learning_rate = 1e-2;
  const auto r = fit(ten, ten, mil(Ordering::I2, Pooling::Max), cfg);
  EXPECT_EQ(evaluate(r.model, ten).ba, 1.0);
}

TEST(Evaluate, RejectsShapeMismatch) {
  RandomStream rng(1);
  const Model m = init_model(mil(Ordering::I1, Pooling::Max), std::nullopt, HeadInit::Zero, rng);
  auto spec = bags_spec(6, 1);
  spec.dim = 8;
  try {
    evaluate(m, generate(spec));
    FAIL() << "expected ValidationError";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
  }
}

// --- checkpoints ------------------------------------------------------------

TEST_F(TrainedModel, CheckpointRoundTripIsBitExact) {
  const auto path = testing::scratch_dir("ckpt") / "model.ckpt";
  save_checkpoint(path, *model_);
  const Model loaded = load_checkpoint(path);
  EXPECT_EQ(loaded, *model_);
  EXPECT_EQ(serialize_checkpoint(loaded), read_file(path));
  EXPECT_EQ(metrics_json(evaluate(loaded, *val_)), metrics_json(evaluate(*model_, *val_)));
}

TEST(Checkpoint, ImageModelRoundTrip) {
  RandomStream rng(2);
  Model m = init_model(mil(Ordering::E, Pooling::TopK, 1, 6), EncoderShape{3, 5}, HeadInit::Uniform, rng);
  m.seed_overridden = true;
  m.epoch = 7;
  const Model back = deserialize_checkpoint(serialize_checkpoint(m));
  EXPECT_EQ(back, m);
  EXPECT_TRUE(back.seed_overridden);
  ASSERT_TRUE(back.encoder.has_value());
  EXPECT_EQ(back.encoder->patch, 3u);
}

TEST(Checkpoint, TruncatedPayloadIsRejected) {
  RandomStream rng(3);
  const Model m = init_model(mil(Ordering::I1, Pooling::TopK), std::nullopt, HeadInit::Uniform, rng);
  std::string bytes = serialize_checkpoint(m);
  bytes.resize(bytes.size() - 8);
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("does not match manifest"), std::string::npos);
  }
}

TEST(Checkpoint, BadMagicAndNonFiniteAreRejected) {
  RandomStream rng(3);
  const Model m = init_model(mil(Ordering::I1, Pooling::TopK), std::nullopt, HeadInit::Uniform, rng);
  std::string bytes = serialize_checkpoint(m);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), FormatError);

  std::string nan_bytes = bytes;
  const auto quiet_nan = std::bit_cast<std::uint64_t>(std::numeric_limits<double>::quiet_NaN());
  for (int i = 0; i < 8; ++i)
    nan_bytes[nan_bytes.size() - 8 + i] = static_cast<char>((quiet_nan >> (8 * i)) & 0xFF);
  EXPECT_THROW(deserialize_checkpoint(nan_bytes), FormatError);
}

TEST(Checkpoint, HeaderShapeMismatchIsRejected) {
  RandomStream rng(3);
  const Model m = init_model(mil(Ordering::I1, Pooling::TopK), std::nullopt, HeadInit::Uniform, rng);
  std::string bytes = serialize_checkpoint(m);
  const auto at = bytes.find("[3,16]");
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, 6, "[3,15]");
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
}

}  // namespace
}  // namespace milkit
