// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "oracles/oracle_values.hpp"
#include "reseg/model_io.hpp"
#include "reseg/training.hpp"
#include "test_support.hpp"

using namespace reseg;

namespace {


void check_all_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

TensorD random_probs(std::size_t h, std::size_t w, std::size_t k, std::mt19937_64& rng) {
  return softmax_channels(testing::uniform({h, w, k}, rng, -2.0, 2.0));
}

LabelMap random_labels(std::size_t h, std::size_t w, std::size_t k, std::mt19937_64& rng) {
  LabelMap m(h, w);
  for (auto& v : m.labels) v = static_cast<std::int32_t>(rng() % k);
  return m;
}

std::vector<Sample> tiny_samples(std::size_t count, std::uint64_t seed) {
  SynthOptions o;
  o.count = count;
  o.height = 8;
  o.width = 8;
  o.seed = seed;
  o.min_shape_fraction = 0.4;
  o.max_shape_fraction = 0.7;
  return synth_samples(o).samples;
}

}  // namespace

TEST_CASE("median-frequency weights") {
  check_all_close(median_frequency_weights(std::vector<double>{0.5, 0.3, 0.2}), {0.6, 1.0, 1.5}, 1e-12);
  check_all_close(median_frequency_weights(std::vector<double>{0.4, 0.3, 0.2, 0.1}), {0.625, 0.3 / 0.36 * 1.0, 1.25, 2.5},
                  1e-3);
  check_all_close(median_frequency_weights(std::vector<double>{0.25, 0.25, 0.25, 0.25}), {1, 1, 1, 1}, 1e-12);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> f(2 + rng() % 6);
    for (auto& v : f) v = u(rng);
    std::vector<double> scaled = f;
    for (auto& v : scaled) v *= 7.5;
    check_all_close(median_frequency_weights(f), median_frequency_weights(scaled), 1e-12);
    // The median class gets weight one for odd class counts.
    if (f.size() % 2 == 1) {
      auto w = median_frequency_weights(f);
      CHECK(std::count_if(w.begin(), w.end(), [](double x) { return std::abs(x - 1.0) < 1e-12; }) >= 1);
    }
  }

  std::vector<std::string> warnings;
  auto w = median_frequency_weights(std::vector<double>{0.5, 0.0, 0.5}, &warnings);
  CHECK(w[1] == 0.0);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("class 1") != std::string::npos);
  CHECK_THROWS_AS(median_frequency_weights(std::vector<double>{}), ConfigError);
}

TEST_CASE("weighted cross-entropy values") {
  LossConfig cfg;
  SUBCASE("a confident correct prediction costs nothing") {
    TensorD p({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    CHECK(weighted_cross_entropy(p, LabelMap(1, 2, std::vector<std::int32_t>{0, 1}), cfg) <= 1e-10);
  }
  SUBCASE("a uniform two-class guess costs ln 2") {
    TensorD p({2, 2, 2}, std::vector<double>(8, 0.5));
    CHECK(weighted_cross_entropy(p, LabelMap(2, 2, 1), cfg) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  }
  SUBCASE("frozen reference value") {
    TensorD logits = testing::sin_fill({4, 4, 3}, 0.77, 0.05, 2.0);
    TensorD probs = softmax_channels(logits);
    LabelMap target(4, 4);
    for (std::size_t p = 0; p < 16; ++p) target.labels[p] = static_cast<std::int32_t>((p * 7) % 3);
    target.labels[5] = 255;
    cfg.class_weights = {0.5, 1.0, 2.0};
    cfg.void_class = 255;
    CHECK(std::abs(weighted_cross_entropy(probs, target, cfg) - oracle::kWeightedCrossEntropy[0]) <= 1e-6);
    CHECK(std::abs(weighted_cross_entropy(probs.cast<float>(), target, cfg) - oracle::kWeightedCrossEntropy[0]) <=
          1e-6);
  }
  SUBCASE("unit weights match the unweighted loss, and pixel order does not matter") {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      const auto probs = random_probs(3, 5, 4, rng);
      const auto target = random_labels(3, 5, 4, rng);
      LossConfig unit;
      unit.class_weights = {1, 1, 1, 1};
      const double plain = weighted_cross_entropy(probs, target, cfg);
      CHECK(weighted_cross_entropy(probs, target, unit) == doctest::Approx(plain).epsilon(1e-12));

      std::vector<std::size_t> perm(15);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      TensorD p2({3, 5, 4});
      LabelMap t2(3, 5);
      for (std::size_t i = 0; i < 15; ++i) {
        for (std::size_t k = 0; k < 4; ++k) p2[perm[i] * 4 + k] = probs[i * 4 + k];
        t2.labels[perm[i]] = target.labels[i];
      }
      CHECK(weighted_cross_entropy(p2, t2, cfg) == doctest::Approx(plain).epsilon(1e-12));
    }
  }
  SUBCASE("labels outside the class range") {
    TensorD p({1, 1, 2}, {0.5, 0.5});
    CHECK_THROWS_AS(weighted_cross_entropy(p, LabelMap(1, 1, 2), cfg), DimensionError);
    cfg.void_class = 255;
    CHECK_NOTHROW(weighted_cross_entropy(p, LabelMap(1, 1, 255), cfg));
    CHECK_THROWS_AS(weighted_cross_entropy(p, LabelMap(2, 1, 0), cfg), DimensionError);
  }
  SUBCASE("loss configuration validation") {
    cfg.class_weights = {1.0};
    CHECK_THROWS_AS(cfg.validate(2), ConfigError);
    cfg.class_weights = {1.0, -1.0};
    CHECK_THROWS_AS(cfg.validate(2), ConfigError);
    cfg.class_weights = {1.0, 0.0};
    CHECK_NOTHROW(cfg.validate(2));
    cfg.l2 = -0.1;
    CHECK_THROWS_AS(cfg.validate(2), ConfigError);
  }
}

TEST_CASE("taped cross-entropy gradient matches finite differences") {
  std::mt19937_64 rng(9);
  LossConfig cfg;
  cfg.class_weights = {0.5, 1.0, 3.0};
  cfg.void_class = 255;
  auto target = random_labels(3, 3, 3, rng);
  target.labels[4] = 255;
  TensorD probs = testing::uniform({3, 3, 3}, rng, 0.2, 1.0);

  Tape<double> tape;
  const Var p = tape.parameter("p", probs);
  const Var l = ad::weighted_cross_entropy(tape, p, target, cfg);
  tape.mark_loss(l);
  CHECK(tape.value(l)[0] == doctest::Approx(weighted_cross_entropy(probs, target, cfg)).epsilon(1e-12));
  const auto grads = tape.backward();
  const auto numeric =
      finite_difference_grad([&](const TensorD& x) { return weighted_cross_entropy(x, target, cfg); }, probs, 1e-6);
  for (std::size_t i = 0; i < probs.size(); ++i) CHECK(relative_error(grads.at("p")[i], numeric[i]) <= 1e-6);
}

TEST_CASE("adadelta") {
  ModelD model = build_model<double>(ModelConfig::tiny());
  auto zero_grads = [&] {
    GradientMap<double> g;
    for (const auto& p : model.parameters()) g.emplace(p.id, TensorD(p.value.shape()));
    return g;
  };
  LossConfig no_decay;
  no_decay.l2 = 0.0;

  SUBCASE("a zero gradient without decay leaves parameters alone") {
    auto state = BasicAdadeltaState<double>::zeros(model);
    const ModelD before = model;
    adadelta_update(model, zero_grads(), state, no_decay);
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
      CHECK(model.parameters()[i].value == before.parameters()[i].value);
  }
  SUBCASE("two steps on one coordinate follow the reference trajectory") {
    auto state = BasicAdadeltaState<double>::zeros(model);
    model.parameter("classifier.bias").value[0] = 0.5;
    auto g = zero_grads();
    g.at("classifier.bias")[0] = 0.2;
    adadelta_update(model, g, state, no_decay);
    const double first = model.parameter("classifier.bias").value[0];
    CHECK(std::abs(first - oracle::kAdadeltaTwoSteps[0]) <= 1e-12);
    // First step: -sqrt(eps) / sqrt((1 - rho) g^2 + eps) * g.
    CHECK(first == doctest::Approx(0.5 - std::sqrt(1e-6) / std::sqrt(0.05 * 0.04 + 1e-6) * 0.2).epsilon(1e-14));
    adadelta_update(model, g, state, no_decay);
    CHECK(std::abs(model.parameter("classifier.bias").value[0] - oracle::kAdadeltaTwoSteps[1]) <= 1e-12);
  }
  SUBCASE("weight decay acts on weights and not on biases") {
    auto state = BasicAdadeltaState<double>::zeros(model);
    LossConfig decay;
    decay.l2 = 0.5;
    model.parameter("classifier.bias").value[0] = 0.5;
    const double w0 = model.parameter("classifier.kernel").value[0];
    REQUIRE(w0 != 0.0);
    adadelta_update(model, zero_grads(), state, decay);
    CHECK(model.parameter("classifier.bias").value[0] == 0.5);
    const double w1 = model.parameter("classifier.kernel").value[0];
    CHECK(std::abs(w1) < std::abs(w0));
    const double g = decay.l2 * w0;
    CHECK(w1 == doctest::Approx(w0 - std::sqrt(1e-6) / std::sqrt(0.05 * g * g + 1e-6) * g).epsilon(1e-12));
  }
  SUBCASE("frozen parameters are untouched") {
    ModelConfig cfg = ModelConfig::tiny();
    cfg.frontend.push_back(FrontendStage::convolution(ConvSpec{1, 1, 3, 3, 1, 1, {}}));
    cfg.frontend_frozen = true;
    ModelD frozen = build_model<double>(cfg);
    auto state = BasicAdadeltaState<double>::zeros(frozen);
    GradientMap<double> g;
    for (const auto& p : frozen.parameters()) g.emplace(p.id, TensorD(p.value.shape(), std::vector<double>(p.value.size(), 1.0)));
    const ModelD before = frozen;
    adadelta_update(frozen, g, state, no_decay);
    std::size_t frozen_count = 0;
    for (std::size_t i = 0; i < frozen.parameters().size(); ++i) {
      const auto& p = frozen.parameters()[i];
      if (p.frozen) {
        ++frozen_count;
        CHECK(p.value == before.parameters()[i].value);
      } else {
        CHECK(p.value != before.parameters()[i].value);
      }
    }
    CHECK(frozen_count == 2);
  }
  SUBCASE("a non-finite gradient aborts the whole step") {
    auto state = BasicAdadeltaState<double>::zeros(model);
    auto g = zero_grads();
    for (auto& [id, t] : g) std::fill(t.values().begin(), t.values().end(), 0.1);
    g.at("classifier.bias")[1] = std::nan("");
    const ModelD before = model;
    CHECK_THROWS_AS(adadelta_update(model, g, state, no_decay), NumericError);
    for (std::size_t i = 0; i < model.parameters().size(); ++i)
      CHECK(model.parameters()[i].value == before.parameters()[i].value);
  }
}

TEST_CASE("batches and epoch order") {
  std::vector<std::size_t> order(7);
  std::iota(order.begin(), order.end(), 0);
  auto batches = partition_batches(order, 5);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].size() == 5);
  CHECK(batches[1] == std::vector<std::size_t>{5, 6});
  CHECK_THROWS_AS(partition_batches(order, 0), ConfigError);

  auto a = epoch_order(20, 11, 3);
  CHECK(a == epoch_order(20, 11, 3));
  CHECK(a != epoch_order(20, 11, 4));
  CHECK(a != epoch_order(20, 12, 3));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> ids(20);
  std::iota(ids.begin(), ids.end(), 0);
  CHECK(sorted == ids);
}

TEST_CASE("batch gradients do not depend on the thread count") {
  const Model model = build_model<float>(ModelConfig::tiny());
  const auto samples = tiny_samples(5, 2);
  std::vector<const Sample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  LossConfig loss;
  double l1 = 0.0, l4 = 0.0;
  const auto g1 = batch_gradient(model, std::span<const Sample* const>(batch), loss, 1, &l1);
  const auto g4 = batch_gradient(model, std::span<const Sample* const>(batch), loss, 4, &l4);
  CHECK(l1 == l4);
  for (const auto& [id, g] : g1) CHECK(g == g4.at(id));

  // The batch gradient is the mean of the per-image gradients.
  GradientMap<float> sum;
  for (const auto* s : batch) {
    const Sample* one[] = {s};
    for (auto& [id, g] : batch_gradient(model, std::span<const Sample* const>(one), loss, 1)) {
      auto [it, inserted] = sum.try_emplace(id, g);
      if (!inserted) axpy(1.0f, g, it->second);
    }
  }
  for (const auto& [id, g] : g1)
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - sum.at(id)[i] / 5.0f) <= 1e-6f);
}

TEST_CASE("training loop") {
  const auto samples = tiny_samples(6, 5);
  TrainConfig tc;
  tc.batch_size = 2;
  tc.seed = 1;
  LossConfig loss;
  loss.l2 = 0.0;

  SUBCASE("zero epochs changes nothing") {
    Checkpoint state{build_model<float>(ModelConfig::tiny()), std::nullopt, 0, -1.0};
    const Model before = state.model;
    tc.max_epochs = 0;
    auto result = train(state, samples, {}, tc, loss);
    CHECK(result.log.empty());
    CHECK(state.model.parameters()[0].value == before.parameters()[0].value);
  }
  SUBCASE("the training loss falls every epoch") {
    Checkpoint state{build_model<float>(ModelConfig::tiny()), std::nullopt, 0, -1.0};
    tc.max_epochs = 5;
    auto result = train(state, samples, {}, tc, loss);
    REQUIRE(result.log.size() == 5);
    CHECK_FALSE(result.aborted);
    for (std::size_t e = 1; e < 5; ++e) CHECK(result.log[e].mean_loss < result.log[e - 1].mean_loss);
    CHECK(state.epoch == 5);
  }
  SUBCASE("runs are reproducible and resumable") {
    tc.max_epochs = 4;
    Checkpoint a{build_model<float>(ModelConfig::tiny()), std::nullopt, 0, -1.0};
    Checkpoint b = a;
    train(a, samples, {}, tc, loss);
    tc.max_epochs = 2;
    train(b, samples, {}, tc, loss);
    const std::string bytes = serialize_checkpoint(b);
    Checkpoint resumed = deserialize_checkpoint(bytes);
    tc.max_epochs = 4;
    train(resumed, samples, {}, tc, loss);
    CHECK(serialize_checkpoint(resumed) == serialize_checkpoint(a));
  }
  SUBCASE("output files") {
    testing::TempDir dir("train_out");
    Checkpoint state{build_model<float>(ModelConfig::tiny()), std::nullopt, 0, -1.0};
    tc.max_epochs = 3;
    tc.eval_every = 2;
    tc.output_dir = dir.path();
    loss.class_weights = {0.75, 1.5};
    loss.void_class = 255;
    train(state, samples, {}, tc, loss);
    for (const char* f : {"log.csv", "last.model", "best.model"}) CHECK(std::filesystem::exists(dir / f));
    std::ifstream in(dir / "log.csv");
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    REQUIRE(lines.size() == 7);
    CHECK(lines[0] == "# class_weights: 0.75 1.5");
    CHECK(lines[1] == "# void_class: 255");
    CHECK(lines[2] == "# l2: 0");
    CHECK(lines[3] == "epoch,mean_loss,global_acc,mean_iou,wall_seconds");
    CHECK(lines[4].rfind("1,", 0) == 0);
    CHECK(lines[4].find(",,,") != std::string::npos);
    CHECK(lines[5].find(",,,") == std::string::npos);
    CHECK(load_checkpoint(dir / "last.model").epoch == 3);
  }
  SUBCASE("mismatched extents are rejected") {
    Checkpoint state{build_model<float>(ModelConfig::tiny()), std::nullopt, 0, -1.0};
    std::vector<Sample> wrong = {Sample{"w", Tensor({16, 16, 3}), LabelMap(16, 16)}};
    tc.max_epochs = 1;
    CHECK_THROWS_AS(train(state, wrong, {}, tc, loss), DimensionError);
    CHECK_THROWS_AS(train(state, {}, {}, tc, loss), ConfigError);
  }
}
