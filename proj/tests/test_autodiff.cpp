// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>

#include "reseg/autodiff.hpp"
#include "reseg/layers.hpp"
#include "test_support.hpp"

using namespace reseg;
using testing::uniform;

namespace {

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

// Runs `op` on `inputs` (registered as parameters x0, x1, ...) under the
// objective 0.5 * ||op(inputs)||^2.
double run_objective(const Builder& op, const std::vector<TensorD>& inputs, GradientMap<double>* grads) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (std::size_t i = 0; i < inputs.size(); ++i) vars.push_back(tape.parameter("x" + std::to_string(i), inputs[i]));
  Var y = op(tape, vars);
  Var loss = ad::half_squared_norm(tape, {y}, 1.0);
  tape.mark_loss(loss);
  const double value = tape.value(loss)[0];
  if (grads) *grads = tape.backward();
  return value;
}

// Largest relative error between tape and central-difference gradients over
// every coordinate of every input.
double single_op_error(const Builder& op, const std::vector<TensorD>& inputs, double epsilon = 1e-3) {
  GradientMap<double> grads;
  run_objective(op, inputs, &grads);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto evaluate = [&](const TensorD& p) {
      auto moved = inputs;
      moved[i] = p;
      return run_objective(op, moved, nullptr);
    };
    const TensorD numeric = finite_difference_grad(evaluate, inputs[i], epsilon);
    const TensorD& analytic = grads.at("x" + std::to_string(i));
    for (std::size_t j = 0; j < numeric.size(); ++j) worst = std::max(worst, relative_error(analytic[j], numeric[j]));
  }
  return worst;
}

// Values whose magnitude stays above `gap`, so relu kinks are out of reach of
// the difference step.
TensorD away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.1) {
  auto t = uniform(std::move(shape), rng);
  for (auto& v : t.values()) v = v < 0 ? v - gap : v + gap;
  return t;
}

std::vector<TensorD> gru_inputs(std::size_t in_dim, std::size_t units, std::mt19937_64& rng) {
  auto p = GruParams<double>::zeros(in_dim, units);
  std::vector<TensorD> out;
  for (auto* t : p.tensors()) out.push_back(uniform(t->shape(), rng, -0.8, 0.8));
  return out;
}

ad::GruVars gru_vars(const std::vector<Var>& v, std::size_t offset) {
  ad::GruVars g;
  for (std::size_t k = 0; k < 9; ++k) g[k] = v[offset + k];
  return g;
}

}  // namespace

TEST_CASE("gradient of sum is all ones") {
  Tape<double> tape;
  Var x = tape.parameter("x", TensorD({2, 2}, std::vector<double>{1, -2, 3, 4}));
  tape.mark_loss(ad::sum(tape, x));
  auto g = tape.backward();
  CHECK(g.at("x") == TensorD({2, 2}, 1.0));
}

TEST_CASE("relu subgradient is zero for negative inputs") {
  Tape<double> tape;
  Var x = tape.parameter("x", TensorD({2}, std::vector<double>{-1, 2}));
  tape.mark_loss(ad::sum(tape, ad::activation(tape, x, Activation::relu)));
  auto g = tape.backward();
  CHECK(g.at("x") == TensorD({2}, std::vector<double>{0, 1}));
}

TEST_CASE("backward needs a marked loss root") {
  Tape<double> tape;
  Var x = tape.parameter("x", TensorD({2}, 1.0));
  ad::sum(tape, x);
  CHECK_THROWS_AS(tape.backward(), UsageError);
  Tape<double> other;
  Var y = other.parameter("y", TensorD({2}, 1.0));
  CHECK_THROWS_AS(other.mark_loss(y), UsageError);
}

TEST_CASE("non-finite intermediate values name the operation") {
  Tape<double> tape;
  Var x = tape.parameter("x", TensorD({2}, 1e308));
  Var big = ad::scale(tape, x, 10.0);
  tape.mark_loss(ad::sum(tape, big));
  try {
    tape.backward();
    FAIL("expected a NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("operation #") != std::string::npos);
    CHECK(msg.find("scale") != std::string::npos);
  }
}

TEST_CASE("unreachable and frozen parameters receive zero gradients") {
  Tape<double> tape;
  Var x = tape.parameter("x", TensorD({3}, 2.0));
  tape.parameter("unused", TensorD({2, 2}, 5.0));
  Var f = tape.parameter("frozen", TensorD({3}, 1.0), true);
  tape.mark_loss(ad::sum(tape, ad::add(tape, x, f)));
  auto g = tape.backward();
  CHECK(g.at("unused") == TensorD({2, 2}, 0.0));
  CHECK(g.at("frozen") == TensorD({3}, 0.0));
  CHECK(g.at("x") == TensorD({3}, 1.0));
}

TEST_CASE("backward twice gives identical gradients") {
  std::mt19937_64 rng(2);
  Tape<double> tape;
  Var x = tape.parameter("x", uniform({4, 4, 2}, rng));
  Var k = tape.parameter("k", uniform({3, 3, 2, 3}, rng));
  Var b = tape.parameter("b", uniform({3}, rng));
  Var y = ad::softmax_channels(tape, ad::conv2d(tape, x, ConvSpec{3, 3, 2, 3, 1, 1, Padding::uniform(1)}, k, b));
  tape.mark_loss(ad::half_squared_norm(tape, {y}, 1.0));
  auto first = tape.backward();
  auto second = tape.backward();
  CHECK(first == second);
}

TEST_CASE("scaling the loss scales every gradient") {
  std::mt19937_64 rng(4);
  const auto x0 = uniform({3, 3, 2}, rng);
  const auto k0 = uniform({2, 2, 2, 2}, rng);
  auto grads_for = [&](double c) {
    Tape<double> tape;
    Var x = tape.parameter("x", x0);
    Var k = tape.parameter("k", k0);
    Var b = tape.constant(TensorD({2}));
    Var y = ad::activation(tape, ad::conv2d(tape, x, ConvSpec{2, 2, 2, 2, 1, 1, {}}, k, b), Activation::tanh);
    tape.mark_loss(ad::scale(tape, ad::half_squared_norm(tape, {y}, 1.0), c));
    return tape.backward();
  };
  const auto base = grads_for(1.0);
  for (double c : {-2.5, 0.125, 7.0}) {
    const auto scaled = grads_for(c);
    for (const auto& [id, g] : base) {
      const auto& s = scaled.at(id);
      for (std::size_t i = 0; i < g.size(); ++i) CHECK(s[i] == doctest::Approx(c * g[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("finite_difference_grad") {
  auto square = [](const TensorD& p) { return p[0] * p[0]; };
  auto g = finite_difference_grad(square, TensorD({1}, 3.0), 1e-3);
  CHECK(std::abs(g[0] - 6.0) <= 1e-6);

  auto constant = [](const TensorD&) { return 4.2; };
  CHECK(finite_difference_grad(constant, TensorD({5}, 1.0), 1e-3) == TensorD({5}, 0.0));

  auto cubic = [](const TensorD& p) { return p[0] * p[0] * p[0] + 2 * p[1]; };
  auto sub = finite_difference_grad(cubic, TensorD({2}, std::vector<double>{1.0, 1.0}), 1e-4, {1});
  CHECK(sub[0] == 0.0);
  CHECK(sub[1] == doctest::Approx(2.0));

  int calls = 0;
  auto drifting = [&calls](const TensorD& p) { return p[0] + 1e-3 * ++calls; };
  CHECK_THROWS_AS(finite_difference_grad(drifting, TensorD({1}, 0.0), 1e-3), DeterminismError);
  CHECK_THROWS_AS(finite_difference_grad(square, TensorD({1}, 0.0), 0.0), UsageError);
}

TEST_CASE("relative_error uses the larger magnitude with a 1e-8 floor") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(relative_error(0.0, 1e-9) == doctest::Approx(0.1));
}

TEST_CASE("a three-layer composition matches central differences") {
  std::mt19937_64 rng(21);
  std::vector<TensorD> in = {uniform({4, 4, 2}, rng),       uniform({3, 3, 2, 3}, rng), uniform({3}, rng),
                             uniform({2, 2, 3, 3}, rng), uniform({3}, rng)};
  Builder op = [](Tape<double>& t, const std::vector<Var>& v) {
    Var h = ad::conv2d(t, v[0], ConvSpec{3, 3, 2, 3, 1, 1, Padding::uniform(1)}, v[1], v[2]);
    h = ad::activation(t, h, Activation::tanh);
    h = ad::conv2d(t, h, ConvSpec{2, 2, 3, 3, 2, 2, {}}, v[3], v[4]);
    h = ad::activation(t, h, Activation::sigmoid);
    return ad::softmax_channels(t, h);
  };
  CHECK(single_op_error(op, in, 1e-4) <= 1e-4);
}

TEST_CASE("single-op gradient checks") {
  std::mt19937_64 rng(33);
  const double tol = 1e-5;
  // Chained gates leave some coordinates with gradients near 1e-7, where the
  // O(eps^2) truncation of a 1e-3 step alone exceeds the tolerance.
  const double recurrent_eps = 1e-4;

  SUBCASE("add, scale, sum") {
    std::vector<TensorD> in = {uniform({2, 3}, rng), uniform({2, 3}, rng)};
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::add(t, v[0], v[1]); }, in) <= tol);
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::scale(t, v[0], -1.7); }, in) <= tol);
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::sum(t, v[1]); }, in) <= tol);
  }
  SUBCASE("activations") {
    std::vector<TensorD> in = {away_from_zero({3, 2, 2}, rng)};
    for (auto kind : {Activation::relu, Activation::tanh, Activation::sigmoid}) {
      CHECK(single_op_error([kind](auto& t, const auto& v) { return ad::activation(t, v[0], kind); }, in) <= tol);
    }
  }
  SUBCASE("conv2d with stride and padding") {
    ConvSpec s{3, 2, 2, 3, 2, 1, Padding{1, 0, 0, 1}};
    std::vector<TensorD> in = {uniform({5, 4, 2}, rng), uniform(s.kernel_shape(), rng), uniform({3}, rng)};
    CHECK(single_op_error([s](auto& t, const auto& v) { return ad::conv2d(t, v[0], s, v[1], v[2]); }, in) <= tol);
  }
  SUBCASE("transposed_conv2d") {
    auto s = ConvSpec::tied(2, 3, 2, 3);
    std::vector<TensorD> in = {uniform({2, 2, 3}, rng), uniform(s.kernel_shape(), rng), uniform({2}, rng)};
    CHECK(single_op_error([s](auto& t, const auto& v) { return ad::transposed_conv2d(t, v[0], s, v[1], v[2]); }, in) <=
          tol);
  }
  SUBCASE("concat and softmax") {
    std::vector<TensorD> in = {uniform({2, 3, 2}, rng), uniform({2, 3, 3}, rng)};
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::concat_channels(t, v[0], v[1]); }, in) <= tol);
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::softmax_channels(t, v[1]); }, in) <= tol);
  }
  SUBCASE("max pooling") {
    std::vector<TensorD> in = {uniform({4, 6, 2}, rng)};
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::max_pool2x2(t, v[0]); }, in) <= tol);
  }
  SUBCASE("half squared norm") {
    std::vector<TensorD> in = {uniform({3}, rng), uniform({2, 2}, rng)};
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::half_squared_norm(t, {v[0], v[1]}, 0.3); }, in) <=
          tol);
  }
  SUBCASE("split_patches") {
    std::vector<TensorD> in = {uniform({4, 6, 2}, rng)};
    CHECK(single_op_error([](auto& t, const auto& v) { return ad::split_patches(t, v[0], 2, 3); }, in) <= tol);
  }
  SUBCASE("directional sweeps") {
    for (auto d : {Direction::down, Direction::up, Direction::right, Direction::left}) {
      auto in = gru_inputs(3, 2, rng);
      in.push_back(uniform({3, 2, 3}, rng));
      Builder op = [d](auto& t, const auto& v) { return ad::directional_sweep(t, gru_vars(v, 0), d, v[9]); };
      CHECK(single_op_error(op, in, recurrent_eps) <= tol);
    }
  }
  SUBCASE("renet layer") {
    std::vector<TensorD> in;
    for (std::size_t s = 0; s < 4; ++s) {
      auto g = gru_inputs(s < 2 ? 8 : 4, 2, rng);
      in.insert(in.end(), g.begin(), g.end());
    }
    in.push_back(uniform({4, 2, 2}, rng));
    Builder op = [](auto& t, const auto& v) {
      ad::ReNetVars r{gru_vars(v, 0), gru_vars(v, 9), gru_vars(v, 18), gru_vars(v, 27), 2, 2};
      return ad::renet_layer(t, r, v[36]);
    };
    CHECK(single_op_error(op, in, recurrent_eps) <= tol);
  }
  SUBCASE("upsample layer") {
    auto s = ConvSpec::tied(2, 2, 3, 2);
    std::vector<TensorD> in = {uniform({2, 2, 2}, rng), uniform(s.kernel_shape(), rng), away_from_zero({3}, rng, 0.2)};
    CHECK(single_op_error([s](auto& t, const auto& v) { return ad::upsample_layer(t, s, v[1], v[2], v[0]); }, in) <=
          tol);
  }
  SUBCASE("conv front-end") {
    std::vector<FrontendStage> stages = {FrontendStage::convolution({3, 3, 2, 2, 1, 1, Padding::uniform(1)}),
                                         FrontendStage::pool(),
                                         FrontendStage::convolution({1, 1, 2, 3, 1, 1, {}})};
    std::vector<TensorD> in = {uniform({4, 4, 2}, rng), uniform({3, 3, 2, 2}, rng), away_from_zero({2}, rng, 0.3),
                               uniform({1, 1, 2, 3}, rng), away_from_zero({3}, rng, 0.3)};
    Builder op = [stages](auto& t, const auto& v) {
      return ad::conv_frontend(t, stages, {v[1], v[3]}, {v[2], v[4]}, v[0]);
    };
    CHECK(single_op_error(op, in) <= tol);
  }
}

TEST_CASE("sweep gradient discrepancy shrinks quadratically with the difference step") {
  std::mt19937_64 rng(33);
  std::vector<TensorD> in;
  for (std::size_t s = 0; s < 4; ++s) {
    auto g = gru_inputs(s < 2 ? 8 : 4, 2, rng);
    in.insert(in.end(), g.begin(), g.end());
  }
  in.push_back(uniform({4, 2, 2}, rng));
  Builder op = [](auto& t, const auto& v) {
    ad::ReNetVars r{gru_vars(v, 0), gru_vars(v, 9), gru_vars(v, 18), gru_vars(v, 27), 2, 2};
    return ad::renet_layer(t, r, v[36]);
  };
  const double coarse = single_op_error(op, in, 1e-3);
  const double fine = single_op_error(op, in, 1e-4);
  CHECK(fine <= 1e-5);
  CHECK(coarse / fine >= 30.0);
}

TEST_CASE("GradientReport table lists every parameter") {
  GradientReport r;
  r.tolerance = 1e-4;
  r.parameters.push_back({"a.kernel", false, 10, 0, 1e-7, 1e-8, 3, 0.5, 0.5, 0.5, true});
  r.parameters.push_back({"b.bias", false, 2, 0, 1e-2, 1e-3, 1, 0.1, 0.2, 0.2, false});
  r.passed = false;
  r.worst_parameter = "b.bias";
  r.worst_error = 1e-2;
  const auto table = r.to_table();
  CHECK(table.find("a.kernel") != std::string::npos);
  CHECK(table.find("b.bias") != std::string::npos);
  CHECK(table.find("FAIL") != std::string::npos);
}
