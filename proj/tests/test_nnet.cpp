#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "owssd/io.hpp"
#include "owssd/nnet.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace owssd;

namespace {

Feature random_feature(Rng& rng, int dim, double scale = 1.0) {
  Feature x(static_cast<std::size_t>(dim));
  for (auto& v : x) v = normal(rng, 0.0, scale);
  return x;
}

}  // namespace

TEST(Architecture, Validation) {
  EXPECT_NO_THROW(AeArchitecture({{8, 4, 2, 4, 8}}).validate());
  EXPECT_THROW(AeArchitecture({{8, 4}}).validate(), InputError);
  EXPECT_THROW(AeArchitecture({{8, 4, 2, 3, 8}}).validate(), InputError);
  EXPECT_THROW(AeArchitecture({{8, 0, 8}}).validate(), InputError);
  const auto a = AeArchitecture::three_layer(32, 16, 8);
  EXPECT_EQ(a.layer_dims, (std::vector<int>{32, 16, 8, 16, 32}));
  EXPECT_EQ(a.bottleneck_index(), 2u);
}

TEST(Init, ShapesBoundsAndDeterminism) {
  const AeArchitecture arch{{8, 4, 2, 4, 8}};
  const auto m = init_autoencoder(arch, 3);
  ASSERT_EQ(m.layers.size(), 4u);
  for (std::size_t l = 0; l < 4; ++l) {
    const int in = arch.layer_dims[l], out = arch.layer_dims[l + 1];
    EXPECT_EQ(m.layers[l].weight.rows(), out);
    EXPECT_EQ(m.layers[l].weight.cols(), in);
    EXPECT_TRUE(m.layers[l].bias.isZero());
    EXPECT_LE(m.layers[l].weight.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(in));
  }
  EXPECT_EQ(m.parameter_count(), 8u * 4 + 4 + 4 * 2 + 2 + 2 * 4 + 4 + 4 * 8 + 8);
  const auto again = init_autoencoder(arch, 3);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(m.layers[l].weight, again.layers[l].weight);
  EXPECT_NE(m.layers[0].weight, init_autoencoder(arch, 4).layers[0].weight);
}

TEST(Forward, MatchesLoopOracle) {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    auto m = init_autoencoder(AeArchitecture{{6, 5, 3, 5, 6}}, static_cast<std::uint64_t>(t));
    for (auto& l : m.layers) l.bias = Eigen::VectorXd::Random(l.bias.size()) * 0.3;
    const auto x = random_feature(rng, 6);
    const auto got = reconstruct(m, x);
    const auto want = oracle::forward(m, x);
    ASSERT_EQ(got.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
    ASSERT_NEAR(reconstruction_error(m, x), oracle::reconstruction_error(m, x), 1e-12);
    ASSERT_EQ(encode(m, x).size(), 3u);
    // Bit-for-bit repeatability.
    ASSERT_EQ(reconstruct(m, x), got);
  }
}

TEST(Forward, HandComputedTinyNetwork) {
  MlpAutoencoder m;
  m.architecture = AeArchitecture{{2, 1, 2}};
  m.layers.push_back({Eigen::MatrixXd{{1.0, -1.0}}, Eigen::VectorXd{{0.5}}});
  m.layers.push_back({Eigen::MatrixXd{{2.0}, {-1.0}}, Eigen::VectorXd{{0.0, 1.0}}});
  // h = relu(3 - 1 + 0.5) = 2.5; out = (5, -1.5)
  const auto out = reconstruct(m, std::vector<double>{3.0, 1.0});
  EXPECT_DOUBLE_EQ(out[0], 5.0);
  EXPECT_DOUBLE_EQ(out[1], -1.5);
  EXPECT_DOUBLE_EQ(reconstruction_error(m, std::vector<double>{3.0, 1.0}), (4.0 + 6.25) / 2.0);
  // Negative pre-activation is clamped: h = 0, out = (0, 1).
  EXPECT_DOUBLE_EQ(reconstruction_error(m, std::vector<double>{0.0, 1.0}), (0.0 + 0.0) / 2.0);
}

TEST(Forward, RejectsWrongDimension) {
  const auto m = init_autoencoder(AeArchitecture{{4, 2, 4}}, 0);
  EXPECT_THROW(reconstruction_error(m, std::vector<double>(3)), DimensionError);
  EXPECT_THROW(reconstruct(m, std::vector<double>(5)), DimensionError);
}

TEST(Gradient, MatchesFiniteDifferencesOnRandomModels) {
  Rng rng(17);
  int checked = 0;
  for (std::uint64_t seed = 0; checked < 25; ++seed) {
    auto m = init_autoencoder(AeArchitecture{{8, 4, 2, 4, 8}}, seed);
    for (auto& l : m.layers) {
      for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = uniform(rng, -0.2, 0.2);
    }
    const auto x = random_feature(rng, 8);
    if (min_preactivation_margin(m, x) < 1e-3) continue;  // finite differences straddle a ReLU kink
    ASSERT_LT(gradient_check(m, x), 1e-4) << "seed " << seed;
    ++checked;
  }
}

TEST(Gradient, WithNormalization) {
  Rng rng(2);
  auto m = init_autoencoder(AeArchitecture{{5, 3, 5}}, 9);
  m.normalization = Normalization{Eigen::VectorXd::Constant(5, 0.3), Eigen::VectorXd::Constant(5, 2.0)};
  auto x = random_feature(rng, 5);
  while (min_preactivation_margin(m, x) < 1e-3) x = random_feature(rng, 5);
  EXPECT_LT(gradient_check(m, x), 1e-4);
  EXPECT_THROW(gradient_check(m, x, 0.0), InputError);
}

TEST(Train, ConvergesOnRepeatedVector) {
  Rng rng(123);
  const auto x = random_feature(rng, 32);
  const std::vector<Feature> data(200, x);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.learning_rate = 0.001;
  cfg.batch_size = 16;
  const auto r = train(init_autoencoder(AeArchitecture::three_layer(32, 16, 8), 1), data, cfg);
  ASSERT_EQ(r.loss_history.size(), 30u);
  EXPECT_LT(reconstruction_error(r.model, x), 1e-3);
  EXPECT_LT(r.loss_history.back(), r.loss_history.front());
}

TEST(Train, GradientDescentReducesLoss) {
  Rng rng(8);
  std::vector<Feature> data;
  for (int i = 0; i < 64; ++i) data.push_back(random_feature(rng, 6, 0.5));
  TrainConfig cfg;
  cfg.optimizer = Optimizer::GradientDescent;
  cfg.learning_rate = 0.05;
  cfg.epochs = 40;
  cfg.batch_size = 8;
  const auto init = init_autoencoder(AeArchitecture{{6, 4, 6}}, 3);
  const auto r = train(init, data, cfg);
  EXPECT_LT(r.loss_history.back(), mean_reconstruction_error(init, data));
}

TEST(Train, DeterministicForFixedSeed) {
  Rng rng(4);
  std::vector<Feature> data;
  for (int i = 0; i < 50; ++i) data.push_back(random_feature(rng, 8));
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 7;
  cfg.seed = 42;
  const auto init = init_autoencoder(AeArchitecture{{8, 4, 2, 4, 8}}, 1);
  const auto a = train(init, data, cfg), b = train(init, data, cfg);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(model_to_json(a.model).dump(), model_to_json(b.model).dump());
  cfg.seed = 43;
  EXPECT_NE(train(init, data, cfg).loss_history, a.loss_history);
}

TEST(Train, StandardizationIsFittedOnTrainingData) {
  Rng rng(6);
  std::vector<Feature> data;
  for (int i = 0; i < 40; ++i) data.push_back({normal(rng, 5.0, 2.0), normal(rng, -1.0, 0.5), normal(rng, 0.0, 1.0)});
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.standardize = true;
  const auto r = train(init_autoencoder(AeArchitecture{{3, 2, 3}}, 0), data, cfg);
  ASSERT_TRUE(r.model.normalization);
  double mean0 = 0.0;
  for (const auto& x : data) mean0 += x[0];
  EXPECT_NEAR(r.model.normalization->mean[0], mean0 / 40.0, 1e-12);
  EXPECT_NEAR(reconstruction_error(r.model, data[0]), oracle::reconstruction_error(r.model, data[0]), 1e-12);
}

TEST(Train, ErrorCases) {
  const auto m = init_autoencoder(AeArchitecture{{4, 2, 4}}, 0);
  TrainConfig cfg;
  EXPECT_THROW(train(m, std::vector<Feature>{}, cfg), InputError);
  EXPECT_THROW(train(m, std::vector<Feature>{Feature(3, 0.0)}, cfg), DimensionError);
  cfg.epochs = 0;
  EXPECT_THROW(train(m, std::vector<Feature>{Feature(4, 0.0)}, cfg), InputError);
}

TEST(Train, NonFiniteLossReportsEpochAndBatch) {
  const std::vector<Feature> data(4, Feature{1e200, -1e200, 1e200, 1e200});
  TrainConfig cfg;
  cfg.batch_size = 2;
  try {
    train(init_autoencoder(AeArchitecture{{4, 2, 4}}, 0), data, cfg);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.epoch, 0);
    EXPECT_EQ(e.batch, 0);
  }
}

TEST(ModelFile, RoundTripPreservesOutputs) {
  fixtures::TempDir dir;
  Rng rng(10);
  auto m = init_autoencoder(AeArchitecture{{8, 4, 2, 4, 8}}, 77);
  for (auto& l : m.layers) l.bias = Eigen::VectorXd::Random(l.bias.size());
  m.normalization = Normalization{Eigen::VectorXd::Random(8), Eigen::VectorXd::Constant(8, 1.5)};
  save_model(dir / "m.json", m);
  const auto back = load_model(dir / "m.json");
  EXPECT_EQ(back.architecture, m.architecture);
  for (int t = 0; t < 20; ++t) {
    const auto x = random_feature(rng, 8);
    ASSERT_NEAR(reconstruction_error(back, x), reconstruction_error(m, x), 1e-9);
  }
  save_model(dir / "m2.json", back);
  EXPECT_EQ(fixtures::read_bytes(dir / "m.json"), fixtures::read_bytes(dir / "m2.json"));
}

TEST(ModelFile, RejectsMalformedDocuments) {
  auto j = model_to_json(init_autoencoder(AeArchitecture{{4, 2, 4}}, 0));
  auto wrong_schema = j;
  wrong_schema["schema"] = "owssd.model.v0";
  EXPECT_THROW(model_from_json(wrong_schema), SchemaError);
  auto ragged = j;
  ragged["layers"][0]["weight"][0].push_back(1.0);
  EXPECT_THROW(model_from_json(ragged), SchemaError);
  auto bad_shape = j;
  bad_shape["dims"] = {4, 3, 4};
  EXPECT_THROW(model_from_json(bad_shape), SchemaError);
  auto missing = j;
  missing.erase("layers");
  EXPECT_THROW(model_from_json(missing), SchemaError);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig c;
  c.epochs = 7;
  c.learning_rate = 0.02;
  c.optimizer = Optimizer::GradientDescent;
  c.standardize = true;
  c.seed = 9;
  const auto back = train_config_from_json(train_config_to_json(c));
  EXPECT_EQ(train_config_to_json(back), train_config_to_json(c));
  EXPECT_THROW(optimizer_from_string("rmsprop"), ConfigError);
}
