// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit status if
// any criterion fails. Every fixture is seeded, so reruns print the same
// numbers apart from timings.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "reseg/gradcheck.hpp"
#include "reseg/layers.hpp"
#include "reseg/metrics.hpp"
#include "reseg/model.hpp"
#include "reseg/tensor.hpp"
#include "reseg/training.hpp"

using namespace reseg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool passed = false;
  std::string detail;
};

template <typename... Args>
std::string format(const char* fmt, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

template <typename T = double>
BasicTensor<T> uniform(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) { return lo + rng() % (hi - lo + 1); }

template <typename T>
GruParams<T> random_gru(std::size_t in_dim, std::size_t units, std::mt19937_64& rng) {
  auto p = GruParams<T>::zeros(in_dim, units);
  for (auto* t : p.tensors()) *t = uniform<T>(t->shape(), rng, -0.8, 0.8);
  return p;
}

ReNetParams<double> random_renet(std::size_t ph, std::size_t pw, std::size_t channels, std::size_t units,
                                 std::mt19937_64& rng) {
  ReNetParams<double> r;
  r.patch_h = ph;
  r.patch_w = pw;
  r.down = {random_gru<double>(ph * pw * channels, units, rng), Direction::down};
  r.up = {random_gru<double>(ph * pw * channels, units, rng), Direction::up};
  r.right = {random_gru<double>(2 * units, units, rng), Direction::right};
  r.left = {random_gru<double>(2 * units, units, rng), Direction::left};
  return r;
}

ModelConfig reference_config() {
  ModelConfig c;
  c.input_h = 64;
  c.input_w = 64;
  c.renet = {{2, 2, 100}, {1, 1, 100}};
  c.upsample = {{2, 2, 50}, {1, 1, 50}};
  c.classes = 11;
  c.seed = 3;
  return c;
}

ModelConfig random_config(std::mt19937_64& rng) {
  ModelConfig c;
  c.input_channels = pick(rng, 1, 3);
  c.classes = pick(rng, 2, 5);
  c.seed = rng();
  std::size_t channels = c.input_channels;
  std::size_t down_h = 1, down_w = 1;
  const std::size_t stages = pick(rng, 0, 2);
  for (std::size_t s = 0; s < stages; ++s) {
    if (rng() % 2) {
      const std::size_t k = rng() % 2 ? 3 : 1, out = pick(rng, 1, 4);
      c.frontend.push_back(FrontendStage::convolution({k, k, channels, out, 1, 1, Padding::uniform(k / 2)}));
      channels = out;
    } else {
      c.frontend.push_back(FrontendStage::pool());
      down_h *= 2;
      down_w *= 2;
    }
  }
  const std::size_t layers = pick(rng, 1, 2);
  for (std::size_t l = 0; l < layers; ++l) {
    ReNetLayerConfig r{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 4)};
    down_h *= r.patch_h;
    down_w *= r.patch_w;
    c.renet.push_back(r);
  }
  if (rng() % 2 && down_h % 2 == 0 && down_w % 2 == 0 && down_h > 2) {
    c.upsample = {{down_h / 2, down_w / 2, pick(rng, 1, 6)}, {2, 2, pick(rng, 1, 6)}};
  } else {
    c.upsample = {{down_h, down_w, pick(rng, 1, 6)}};
  }
  c.input_h = down_h * pick(rng, 1, 3);
  c.input_w = down_w * pick(rng, 1, 3);
  return c;
}

std::vector<Sample> synth(std::size_t count, std::size_t side, std::uint64_t seed, double min_fraction,
                          double max_fraction) {
  SynthOptions o;
  o.count = count;
  o.height = side;
  o.width = side;
  o.seed = seed;
  o.min_shape_fraction = min_fraction;
  o.max_shape_fraction = max_fraction;
  return synth_samples(o).samples;
}

ConfusionMatrix confusion(const Model& model, std::span<const Sample> samples) {
  ConfusionMatrix cm(model.config().classes);
  for (const auto& s : samples) cm.accumulate(argmax_labels(model.forward(s.image)), s.mask);
  return cm;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const ModelD model = build_model<double>(ModelConfig::tiny());
  const auto report = gradient_check(model, gradient_check_batch(model.config()), 1e-4);
  const double elapsed = seconds_since(t0);
  std::size_t refined = 0;
  for (const auto& p : report.parameters) refined += p.refined;
  return {report.passed && report.worst_error < 1e-4 && elapsed < 60.0,
          format("tiny profile, %zu tensors, worst %.3e (%s), %zu refined coordinates, %.2f s",
                 report.parameters.size(), report.worst_error, report.worst_parameter.c_str(), refined, elapsed)};
}

Outcome adjoint_identity() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(21);
  double worst = 0.0;
  for (int n = 0; n < 100; ++n) {
    const auto spec = ConvSpec::tied(pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 4), pick(rng, 1, 4));
    const std::size_t H = spec.kernel_h * pick(rng, 1, 5), W = spec.kernel_w * pick(rng, 1, 5);
    const auto x = uniform({H, W, spec.in_channels}, rng);
    const auto k = uniform(spec.kernel_shape(), rng);
    const TensorD zero_out({spec.out_channels}), zero_in({spec.in_channels});
    const auto cx = conv2d(x, spec, k, zero_out);
    const auto y = uniform(cx.shape(), rng);
    const auto ty = transposed_conv2d(y, spec, k, zero_in);
    const double lhs = dot(cx, y), rhs = dot(x, ty);
    worst = std::max(worst, std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-30}));
  }
  const double elapsed = seconds_since(t0);
  return {worst <= 1e-10 && elapsed < 10.0,
          format("100 random spec/input pairs, worst relative gap %.3e, %.3f s", worst, elapsed)};
}

Outcome shape_contract() {
  std::mt19937_64 rng(12);
  double worst = 0.0;
  std::size_t bad_shapes = 0;
  for (int n = 0; n < 50; ++n) {
    const auto c = random_config(rng);
    const auto m = build_model<float>(c);
    const auto p = m.forward(uniform<float>({c.input_h, c.input_w, c.input_channels}, rng, 0.0, 1.0));
    if (p.shape() != Shape{c.input_h, c.input_w, c.classes}) {
      ++bad_shapes;
      continue;
    }
    for (std::size_t px = 0; px < c.input_h * c.input_w; ++px) {
      double s = 0.0;
      for (std::size_t k = 0; k < c.classes; ++k) s += p[px * c.classes + k];
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  return {bad_shapes == 0 && worst <= 1e-6,
          format("50 random configs, %zu shape mismatches, worst |sum - 1| %.3e", bad_shapes, worst)};
}

Outcome receptive_field() {
  std::mt19937_64 rng(9);
  double weakest = 1e300;
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_renet(2, 2, 3, 4, rng);
    const auto x = uniform({8, 8, 3}, rng);
    const auto base = renet_layer(p, x);
    for (std::size_t pi = 0; pi < 4; ++pi)
      for (std::size_t pj = 0; pj < 4; ++pj) {
        auto moved = x;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t ch = 0; ch < 3; ++ch) moved(2 * pi + a, 2 * pj + b, ch) += 0.5;
        const auto out = renet_layer(p, moved);
        for (std::size_t r = 0; r < 4; ++r)
          for (std::size_t c = 0; c < 4; ++c) {
            double change = 0.0;
            for (std::size_t u = 0; u < 8; ++u) change = std::max(change, std::abs(out(r, c, u) - base(r, c, u)));
            weakest = std::min(weakest, change);
          }
      }
  }
  return {weakest > 1e-6,
          format("4x4 patch grid, 5 parameter draws x 16 perturbed patches, weakest output change %.3e", weakest)};
}

Outcome sweep_determinism() {
  ::setenv("RESEG_NUM_THREADS", "4", 1);
  std::mt19937_64 rng(7);
  std::size_t mismatches = 0, compared = 0;
  for (int n = 0; n < 20; ++n) {
    const std::size_t D = pick(rng, 1, 6), U = pick(rng, 1, 8);
    const auto gru = random_gru<float>(D, U, rng);
    const auto grid = uniform<float>({pick(rng, 1, 12), pick(rng, 1, 12), D}, rng);
    for (auto dir : {Direction::down, Direction::up, Direction::right, Direction::left}) {
      const SweepParams<float> p{gru, dir};
      ++compared;
      if (!(directional_sweep(p, grid, SweepExecution::parallel) == directional_sweep(p, grid))) ++mismatches;
    }
  }
  return {mismatches == 0, format("20 random inputs x 4 directions on 4 threads, %zu of %zu sweeps differ", mismatches,
                                  compared)};
}

struct OverfitRun {
  double best_accuracy = 0.0;
  double final_accuracy = 0.0;
  std::size_t first_epoch_at_99 = 0;
  double seconds = 0.0;
};

OverfitRun overfit_once(const std::vector<Sample>& samples) {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 32;
  cfg.input_w = 32;
  Checkpoint state{build_model<float>(cfg), std::nullopt, 0, -1.0};
  TrainConfig tc;
  tc.batch_size = 1;
  tc.max_epochs = 200;
  tc.seed = 1;
  LossConfig loss;
  OverfitRun run;
  const auto t0 = Clock::now();
  train(state, samples, {}, tc, loss, [&](const EpochRecord& r) {
    run.best_accuracy = std::max(run.best_accuracy, r.global_acc);
    if (run.first_epoch_at_99 == 0 && r.global_acc >= 0.99) run.first_epoch_at_99 = r.epoch;
  });
  run.seconds = seconds_since(t0);
  run.final_accuracy = global_accuracy(confusion(state.model, samples));
  return run;
}

Outcome overfit() {
  const auto samples = synth(8, 32, 0, 0.3, 0.6);
  const auto a = overfit_once(samples);
  const auto b = overfit_once(samples);
  const bool reached = a.first_epoch_at_99 != 0;
  const bool reproducible = std::abs(a.final_accuracy - b.final_accuracy) <= 0.005;
  return {reached && a.seconds < 300.0 && reproducible,
          format("8 synthetic 32x32 images, batch 1: 99%% first reached at epoch %zu, final accuracy %.4f "
                 "(rerun %.4f), %.1f s per run",
                 a.first_epoch_at_99, a.final_accuracy, b.final_accuracy, a.seconds)};
}

Outcome class_balance() {
  const auto all = synth(24, 32, 3, 0.18, 0.27);
  const std::vector<Sample> train_set(all.begin(), all.begin() + 16), test_set(all.begin() + 16, all.end());
  ModelConfig cfg = ModelConfig::tiny();
  cfg.input_h = 32;
  cfg.input_w = 32;
  const auto freqs = class_frequencies(train_set, 2);

  auto rare_accuracy = [&](bool balanced) {
    Checkpoint state{build_model<float>(cfg), std::nullopt, 0, -1.0};
    TrainConfig tc;
    tc.batch_size = 5;
    tc.max_epochs = 30;
    tc.seed = 2;
    tc.eval_every = 30;
    LossConfig loss;
    if (balanced) loss.class_weights = median_frequency_weights(freqs);
    train(state, train_set, {}, tc, loss);
    return per_class_accuracy(confusion(state.model, test_set)).per_class[1].value_or(0.0);
  };
  const double plain = rare_accuracy(false);
  const double balanced = rare_accuracy(true);
  return {balanced > plain,
          format("foreground:background 1:%.1f, 30 epochs; rare-class test accuracy %.4f unbalanced vs %.4f "
                 "median-frequency",
                 freqs[0] / freqs[1], plain, balanced)};
}

Outcome metric_oracles() {
  constexpr std::int32_t kVoid = 255;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t mismatches = 0;
  for (int n = 0; n < 1000; ++n) {
    const std::size_t K = pick(rng, 2, 5);
    LabelMap pred(16, 16), target(16, 16);
    for (auto& v : pred.labels) v = static_cast<std::int32_t>(rng() % K);
    for (auto& v : target.labels) v = u(rng) < 0.15 ? kVoid : static_cast<std::int32_t>(rng() % K);

    std::uint64_t evaluated = 0, correct = 0;
    std::vector<std::uint64_t> truth(K), inter(K), uni(K);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const auto t = target.labels[i], p = pred.labels[i];
      if (t == kVoid) continue;
      ++evaluated;
      correct += p == t;
      for (std::size_t k = 0; k < K; ++k) {
        const bool in_t = t == static_cast<std::int32_t>(k), in_p = p == static_cast<std::int32_t>(k);
        truth[k] += in_t;
        inter[k] += in_t && in_p;
        uni[k] += in_t || in_p;
      }
    }
    std::vector<std::optional<double>> acc(K), iou(K);
    double acc_sum = 0.0, iou_sum = 0.0;
    std::size_t acc_n = 0, iou_n = 0;
    for (std::size_t k = 0; k < K; ++k) {
      if (truth[k]) {
        acc[k] = static_cast<double>(inter[k]) / static_cast<double>(truth[k]);
        acc_sum += *acc[k];
        ++acc_n;
      }
      if (uni[k]) {
        iou[k] = static_cast<double>(inter[k]) / static_cast<double>(uni[k]);
        iou_sum += *iou[k];
        ++iou_n;
      }
    }

    ConfusionMatrix cm(K);
    cm.accumulate(pred, target, kVoid);
    const auto a = per_class_accuracy(cm), j = mean_iou(cm);
    const bool same = global_accuracy(cm) == static_cast<double>(correct) / static_cast<double>(evaluated) &&
                      a.per_class == acc && j.per_class == iou && a.mean == acc_sum / static_cast<double>(acc_n) &&
                      j.mean == iou_sum / static_cast<double>(iou_n);
    mismatches += !same;
  }
  return {mismatches == 0, format("1000 random 16x16 pairs with 15%% void, %zu inexact results", mismatches)};
}

Outcome orthonormal_init() {
  double worst = 0.0;
  std::size_t matrices = 0;
  std::mt19937_64 rng(31);
  std::vector<ModelConfig> configs = {ModelConfig::tiny(), reference_config()};
  for (int n = 0; n < 10; ++n) configs.push_back(random_config(rng));
  for (const auto& c : configs) {
    const auto m = build_model<float>(c);
    for (const auto& p : m.parameters()) {
      if (p.id.find(".r_") == std::string::npos) continue;
      const std::size_t rows = p.value.extent(0), cols = p.value.extent(1);
      const bool tall = rows >= cols;
      const std::size_t n_out = tall ? cols : rows, n_in = tall ? rows : cols;
      for (std::size_t a = 0; a < n_out; ++a)
        for (std::size_t b = 0; b < n_out; ++b) {
          double s = 0.0;
          for (std::size_t i = 0; i < n_in; ++i) {
            const double va = tall ? p.value(i, a) : p.value(a, i);
            const double vb = tall ? p.value(i, b) : p.value(b, i);
            s += va * vb;
          }
          worst = std::max(worst, std::abs(s - (a == b ? 1.0 : 0.0)));
        }
      ++matrices;
    }
  }
  return {matrices > 0 && worst <= 1e-6,
          format("%zu recurrent matrices in %zu models (32-bit), worst |Q^T Q - I| %.3e", matrices, configs.size(),
                 worst)};
}

Outcome reference_build() {
  const auto t0 = Clock::now();
  const auto cfg = reference_config();
  cfg.validate();
  const auto shapes = infer_shapes(cfg);
  Model model = build_model<float>(cfg);
  std::mt19937_64 rng(41);
  Sample s{"x", uniform<float>({64, 64, 3}, rng, 0.0, 1.0), LabelMap(64, 64)};
  for (auto& v : s.mask.labels) v = static_cast<std::int32_t>(rng() % cfg.classes);
  const Sample* batch[] = {&s};
  double loss = 0.0;
  const auto grads = batch_gradient(model, std::span<const Sample* const>(batch), LossConfig{}, 0, &loss);
  auto state = AdadeltaState::zeros(model);
  const Model before = model;
  adadelta_update(model, grads, state, LossConfig{});
  std::size_t changed = 0;
  for (std::size_t i = 0; i < model.parameters().size(); ++i)
    changed += !(model.parameters()[i].value == before.parameters()[i].value);
  const bool ok = shapes.output == Shape{64, 64, cfg.classes} && std::isfinite(loss) &&
                  grads.size() == model.parameters().size() && changed == model.parameters().size();
  return {ok, format("64x64x3 input, renet 32x32x200 -> 32x32x200, output %s, %zu parameters, loss %.4f, "
                     "%zu of %zu tensors updated, %.1f s",
                     to_string(shapes.output).c_str(), model.parameter_count(), loss, changed,
                     model.parameters().size(), seconds_since(t0))};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient-fidelity", gradient_fidelity},   {"adjoint-identity", adjoint_identity},
      {"shape-contract", shape_contract},         {"receptive-field", receptive_field},
      {"sweep-determinism", sweep_determinism},   {"overfit", overfit},
      {"class-balance", class_balance},           {"metric-oracles", metric_oracles},
      {"orthonormal-init", orthonormal_init},     {"reference-build", reference_build},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("%s %s: %s\n", o.passed ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.passed;
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed ? 1 : 0;
}
