// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "reseg/gradcheck.hpp"
#include "test_support.hpp"

using namespace reseg;

TEST_CASE("the tiny model passes the end-to-end gradient check") {
  const ModelD model = build_model<double>(ModelConfig::tiny());
  const auto batch = gradient_check_batch(model.config());
  REQUIRE(batch.size() == 2);
  const auto report = gradient_check(model, batch, 1e-4);
  CHECK(report.passed);
  CHECK(report.worst_error <= 1e-4);
  CHECK(report.parameters.size() == model.parameters().size());
  for (const auto& p : report.parameters) {
    CHECK(p.checked > 0);
    CHECK(p.max_abs_analytic > 0.0);
  }
}

TEST_CASE("the objective includes weight decay on weights only") {
  const ModelD model = build_model<double>(ModelConfig::tiny());
  const auto batch = gradient_check_batch(model.config(), 3);
  LossConfig plain;
  plain.l2 = 0.0;
  LossConfig decayed;
  decayed.l2 = 0.01;
  double norm = 0.0;
  for (const auto& p : model.parameters())
    if (p.decays && !p.frozen)
      for (double v : p.value.values()) norm += v * v;
  CHECK(gradient_check_objective(model, batch, decayed) ==
        doctest::Approx(gradient_check_objective(model, batch, plain) + 0.005 * norm).epsilon(1e-12));
}

TEST_CASE("an injected fault is caught and named") {
  const ModelD model = build_model<double>(ModelConfig::tiny());
  const auto batch = gradient_check_batch(model.config());
  GradientCheckOptions opts;
  opts.gradient_hook = [](GradientMap<double>& g) {
    for (auto& v : g.at("renet.0.right.w_candidate").values()) v = 0.0;
  };
  const auto report = gradient_check(model, batch, 1e-4, opts);
  CHECK_FALSE(report.passed);
  CHECK(report.worst_parameter == "renet.0.right.w_candidate");
  for (const auto& p : report.parameters) CHECK(p.passed == (p.id != "renet.0.right.w_candidate"));
  CHECK(report.to_table().find("renet.0.right.w_candidate") != std::string::npos);
}

TEST_CASE("failing coordinates are measured again with a finer step") {
  ConvSpec stem = ConvSpec::tied(3, 3, 3, 4);
  stem.stride_h = stem.stride_w = 1;
  stem.padding = Padding::uniform(1);
  ModelConfig cfg = ModelConfig::tiny();
  cfg.frontend.push_back(FrontendStage::convolution(stem));
  const ModelD model = build_model<double>(cfg);
  const auto batch = gradient_check_batch(cfg);
  GradientCheckOptions coarse_only;
  coarse_only.refine_failures = false;
  const auto coarse = gradient_check(model, batch, 1e-4, coarse_only);
  CHECK_FALSE(coarse.passed);
  const auto refined = gradient_check(model, batch, 1e-4);
  CHECK(refined.passed);
  std::size_t count = 0;
  for (const auto& p : refined.parameters) count += p.refined;
  CHECK(count > 0);
  CHECK(refined.to_table().find("refined") != std::string::npos);

  GradientCheckOptions faulty;
  faulty.gradient_hook = [](GradientMap<double>& g) { g.at("upsample.0.kernel")[3] *= 1.01; };
  const auto caught = gradient_check(model, batch, 1e-4, faulty);
  CHECK_FALSE(caught.passed);
  CHECK(caught.worst_parameter == "upsample.0.kernel");
}

TEST_CASE("a blank image with a uniform target is handled") {
  const ModelD model = build_model<double>(ModelConfig::tiny());
  std::vector<Sample> batch = {Sample{"blank", Tensor({8, 8, 3}), LabelMap(8, 8, 1)}};
  const auto report = gradient_check(model, batch, 1e-4);
  for (const auto& p : report.parameters) {
    CHECK(std::isfinite(p.max_rel_error));
    if (!p.passed) CHECK(p.max_abs_analytic == 0.0);
  }
  LossConfig no_decay;
  no_decay.l2 = 0.0;
  for (const auto& [id, g] : gradient_check_analytic(model, batch, no_decay)) {
    if (id == "classifier.bias") continue;
    for (double v : g.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("a frozen front-end gets zero gradient rows") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.frontend.push_back(FrontendStage::convolution(ConvSpec{3, 3, 3, 3, 1, 1, {1, 1, 1, 1}}));
  cfg.frontend_frozen = true;
  const ModelD model = build_model<double>(cfg);
  const auto batch = gradient_check_batch(cfg);
  const auto analytic = gradient_check_analytic(model, batch, LossConfig{});
  for (double v : analytic.at("frontend.0.kernel").values()) CHECK(v == 0.0);
  for (double v : analytic.at("frontend.0.bias").values()) CHECK(v == 0.0);
  const auto report = gradient_check(model, batch, 1e-4);
  CHECK(report.passed);
  std::size_t frozen = 0;
  for (const auto& p : report.parameters) {
    if (!p.frozen) continue;
    ++frozen;
    CHECK(p.max_abs_analytic == 0.0);
    CHECK(p.checked == 0);
  }
  CHECK(frozen == 2);
}
