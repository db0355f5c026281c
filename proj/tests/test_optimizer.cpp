#include <doctest.h>

#include <cmath>

#include "cxr/optimizer.hpp"
#include "test_helpers.hpp"

using namespace cxr;
using test_util::random_tensor;

namespace {

// Learnable toy task: probability of class 0 should track the mean pixel.
TrainingData toy_data(int n, Rng& rng) {
  TrainingData data;
  data.labels.rows = n;
  data.labels.cols = 2;
  for (int i = 0; i < n; ++i) {
    const bool bright = rng.bernoulli(0.5);
    Tensor img = random_tensor({1, 8, 8}, rng, bright ? 0.6 : -0.6, bright ? 1.0 : -0.2);
    data.images.push_back(img);
    data.labels.v.push_back(bright ? 1 : 0);
    data.labels.v.push_back(rng.bernoulli(0.5) ? 1 : 0);
  }
  return data;
}

ModelConfig toy_config() {
  ModelConfig c;
  c.input_channels = 1;
  c.input_h = 8;
  c.input_w = 8;
  c.initial_channels = 4;
  c.growth_rate = 4;
  c.block_layout = {2};
  c.num_classes = 2;
  c.dropout_rate = 0.0;
  return c;
}

}  // namespace

TEST_CASE("adam: one hand-evaluated step") {
  Tensor theta = Tensor::scalar(1.0);
  ParamRef ref{"theta", &theta, true};
  std::vector<double> grad{2.0};
  AdamState adam;
  adam.step({ref}, {&grad}, 0.001);
  // m_hat = 2, v_hat = 4 after bias correction; update = lr*2/(2+eps)
  CHECK(theta.item() == doctest::Approx(1.0 - 0.001).epsilon(1e-7));
  CHECK(std::fabs(theta.item() - (1.0 - 0.001)) < 1e-10);
  CHECK(adam.step_count() == 1);
}

TEST_CASE("adam: zero gradient from zero state leaves parameters put") {
  Tensor theta({3}, {1.0, -2.0, 0.5});
  ParamRef ref{"theta", &theta, true};
  std::vector<double> grad{0.0, 0.0, 0.0};
  AdamState adam;
  adam.step({ref}, {&grad}, 0.1);
  CHECK(theta.values() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam: constant gradient moves by about lr every step") {
  Tensor theta = Tensor::scalar(0.0);
  ParamRef ref{"theta", &theta, true};
  std::vector<double> grad{3.0};
  AdamState adam;
  double prev = theta.item();
  for (int t = 0; t < 50; ++t) {
    adam.step({ref}, {&grad}, 0.001);
    const double step = prev - theta.item();
    CHECK(step == doctest::Approx(0.001).epsilon(1e-6));
    prev = theta.item();
  }
}

TEST_CASE("adam: non-finite gradient is a numeric error naming the parameter") {
  Tensor theta = Tensor::scalar(0.0);
  ParamRef ref{"block0.conv1", &theta, true};
  std::vector<double> grad{std::numeric_limits<double>::quiet_NaN()};
  AdamState adam;
  try {
    adam.step({ref}, {&grad}, 0.001);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("block0.conv1") != std::string::npos);
  }
}

TEST_CASE("lr schedule: plateau rule") {
  TrainConfig cfg;
  cfg.lr_decay_factor = 0.5;
  cfg.min_lr = 1e-5;

  SUBCASE("strictly improving history leaves lr unchanged") {
    cfg.lr_patience = 0;
    CHECK(lr_schedule_update({1.0, 0.9, 0.7}, 0.001, cfg) == 0.001);
  }
  SUBCASE("flat history with patience 0 halves") {
    cfg.lr_patience = 0;
    CHECK(lr_schedule_update({1.0, 1.0}, 0.001, cfg) == doctest::Approx(0.0005));
  }
  SUBCASE("patience 1 needs two stale epochs") {
    cfg.lr_patience = 1;
    CHECK(lr_schedule_update({1.0, 1.0}, 0.001, cfg) == 0.001);
    CHECK(lr_schedule_update({1.0, 1.0, 1.0}, 0.001, cfg) == doctest::Approx(0.0005));
  }
  SUBCASE("floor at min_lr") {
    cfg.lr_patience = 0;
    CHECK(lr_schedule_update({1.0, 1.0}, 1e-5, cfg) == 1e-5);
    CHECK(lr_schedule_update({1.0, 1.0}, 1.5e-5, cfg) == 1e-5);
  }
  SUBCASE("sub-threshold improvement counts as stale") {
    cfg.lr_patience = 0;
    CHECK(lr_schedule_update({1.0, 0.99995}, 0.001, cfg) == doctest::Approx(0.0005));
  }
}

TEST_CASE("train_epoch: batch arithmetic includes the partial batch") {
  Rng rng(1);
  TrainingData data = toy_data(20, rng);
  Model model = build_model(toy_config(), 5);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.seed = 9;
  AdamState adam;
  ClassWeights w = ClassWeights::unit(2);
  train_epoch(model, data, w, cfg, adam, 0.001, 0);
  CHECK(adam.step_count() == 3);  // 8 + 8 + 4
}

TEST_CASE("train_epoch rejects an empty dataset") {
  TrainingData data;
  data.labels.rows = 0;
  data.labels.cols = 2;
  Model model = build_model(toy_config(), 5);
  TrainConfig cfg;
  AdamState adam;
  CHECK_THROWS_AS(train_epoch(model, data, ClassWeights::unit(2), cfg, adam, 1e-3, 0),
                  InvalidArgument);
}

TEST_CASE("training runs are bit-reproducible and reduce the loss") {
  Rng rng(77);
  TrainingData data = toy_data(48, rng);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 5;
  cfg.seed = 13;
  ClassWeights w = compute_weights(compute_frequencies(data.labels));

  Model m1 = build_model(toy_config(), 99);
  TrainResult r1 = train_model(m1, data, w, cfg);
  Model m2 = build_model(toy_config(), 99);
  TrainResult r2 = train_model(m2, data, w, cfg);

  REQUIRE(r1.epochs.size() == 5);
  for (std::size_t e = 0; e < 5; ++e) {
    CHECK(r1.epochs[e].mean_loss == r2.epochs[e].mean_loss);  // identical trajectory
  }
  auto p1 = m1.named_parameters();
  auto p2 = m2.named_parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].tensor->values() == p2[i].tensor->values());  // bit-identical weights
  }

  CHECK(r1.epochs.back().mean_loss < r1.epochs.front().mean_loss);

  // lr never increases and never sinks below the floor
  for (std::size_t e = 1; e < r1.epochs.size(); ++e) {
    CHECK(r1.epochs[e].lr <= r1.epochs[e - 1].lr);
    CHECK(r1.epochs[e].lr >= cfg.min_lr);
  }
}

TEST_CASE("epoch reshuffling permutes, never drops or duplicates") {
  // trains two single-epoch runs with different epoch indices; the loss
  // differs (different order) but the data multiset is intact, which the
  // deterministic rerun above already pins. Here: same epoch index twice
  // must give identical losses.
  Rng rng(31);
  TrainingData data = toy_data(24, rng);
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.seed = 21;
  ClassWeights w = ClassWeights::unit(2);

  Model m1 = build_model(toy_config(), 1);
  AdamState a1;
  const double l1 = train_epoch(m1, data, w, cfg, a1, 1e-3, 4);
  Model m2 = build_model(toy_config(), 1);
  AdamState a2;
  const double l2 = train_epoch(m2, data, w, cfg, a2, 1e-3, 4);
  CHECK(l1 == l2);

  Model m3 = build_model(toy_config(), 1);
  AdamState a3;
  const double l3 = train_epoch(m3, data, w, cfg, a3, 1e-3, 5);
  CHECK(l1 != l3);  // different epoch seed, different order
}

TEST_CASE("train log file format") {
  test_util::TempDir dir("trainlog");
  std::vector<EpochStats> rows;
  EpochStats s;
  s.epoch = 1;
  s.mean_loss = 0.5;
  s.lr = 0.001;
  s.wall_seconds = 1.25;
  rows.push_back(s);
  const auto path = dir.path() / "log.csv";
  write_train_log(rows, path);
  std::ifstream is(path);
  std::string header, row;
  std::getline(is, header);
  std::getline(is, row);
  CHECK(header == "epoch,mean_loss,lr,wall_seconds");
  CHECK(row == "1,0.5,0.001,1.250");
}
