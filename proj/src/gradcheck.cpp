// SPDX-License-Identifier: Apache-2.0
#include "reseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "reseg/errors.hpp"

namespace reseg {

namespace {

void check_batch(std::span<const Sample> batch) {
  if (batch.empty()) throw UsageError("gradient check needs at least one sample");
}

}  // namespace

double gradient_check_objective(const ModelD& model, std::span<const Sample> batch, const LossConfig& loss) {
  check_batch(batch);
  double total = 0.0;
  for (const auto& s : batch) total += weighted_cross_entropy(model.forward(s.image.cast<double>()), s.mask, loss);
  total /= static_cast<double>(batch.size());
  double norm = 0.0;
  for (const auto& p : model.parameters()) {
    if (p.decays && !p.frozen) norm += dot(p.value, p.value);
  }
  return total + 0.5 * loss.l2 * norm;
}

GradientMap<double> gradient_check_analytic(const ModelD& model, std::span<const Sample> batch,
                                            const LossConfig& loss) {
  check_batch(batch);
  Tape<double> tape;
  const ModelVars vars = model.register_parameters(tape);
  Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Var image = tape.constant(batch[i].image.cast<double>());
    const Var probs = model.record_forward(tape, vars, image);
    const Var l = ad::weighted_cross_entropy(tape, probs, batch[i].mask, loss);
    total = i == 0 ? l : ad::add(tape, total, l);
  }
  total = ad::scale(tape, total, 1.0 / static_cast<double>(batch.size()));
  std::vector<Var> decaying;
  for (std::size_t k = 0; k < model.parameters().size(); ++k) {
    const auto& p = model.parameters()[k];
    if (p.decays && !p.frozen) decaying.push_back(vars.all[k]);
  }
  if (!decaying.empty() && loss.l2 != 0.0) total = ad::add(tape, total, ad::half_squared_norm(tape, decaying, loss.l2));
  tape.mark_loss(total);
  return tape.backward();
}

GradientReport gradient_check(const ModelD& model, std::span<const Sample> batch, double tolerance,
                              const GradientCheckOptions& options) {
  if (!(tolerance > 0.0)) throw UsageError("gradient check tolerance must be positive");
  GradientMap<double> analytic = gradient_check_analytic(model, batch, options.loss);
  if (options.gradient_hook) options.gradient_hook(analytic);

  GradientReport report;
  report.tolerance = tolerance;
  const auto& params = model.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto& p = params[k];
    const TensorD& g = analytic.at(p.id);
    ParameterCheck check;
    check.id = p.id;
    check.frozen = p.frozen;
    for (double v : g.values()) check.max_abs_analytic = std::max(check.max_abs_analytic, std::abs(v));

    if (p.frozen) {
      check.passed = check.max_abs_analytic == 0.0;
      if (!check.passed) {
        check.max_rel_error = 1.0;
        check.worst_analytic = check.max_abs_analytic;
      }
    } else {
      std::vector<std::size_t> coords(p.value.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
      if (coords.size() > options.max_coordinates) {
        std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(k)};
        std::mt19937_64 rng(seq);
        for (std::size_t i = 0; i < options.max_coordinates; ++i) {
          const std::size_t j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
          std::swap(coords[i], coords[j]);
        }
        coords.resize(options.max_coordinates);
        std::sort(coords.begin(), coords.end());
      }

      ModelD probe = model;
      auto& slot = probe.parameter(p.id).value;
      auto evaluate = [&](const TensorD& theta) {
        slot = theta;
        return gradient_check_objective(probe, batch, options.loss);
      };
      TensorD numeric = finite_difference_grad(evaluate, p.value, options.epsilon, coords);
      if (options.refine_failures) {
        std::vector<bool> counted(p.value.size(), false);
        for (double divisor : {10.0, 100.0}) {
          std::vector<std::size_t> suspects;
          for (std::size_t i : coords) {
            if (relative_error(g[i], numeric[i]) >= tolerance) suspects.push_back(i);
          }
          if (suspects.empty()) break;
          const TensorD fine = finite_difference_grad(evaluate, p.value, options.epsilon / divisor, suspects);
          for (std::size_t i : suspects) {
            if (relative_error(g[i], fine[i]) < relative_error(g[i], numeric[i])) {
              numeric[i] = fine[i];
              if (!counted[i]) ++check.refined;
              counted[i] = true;
            }
          }
        }
      }

      double sum = 0.0;
      for (std::size_t i : coords) {
        const double e = relative_error(g[i], numeric[i]);
        sum += e;
        if (check.checked == 0 || e > check.max_rel_error) {
          check.max_rel_error = e;
          check.worst_index = i;
          check.worst_analytic = g[i];
          check.worst_numeric = numeric[i];
        }
        ++check.checked;
      }
      check.mean_rel_error = check.checked ? sum / static_cast<double>(check.checked) : 0.0;
      check.passed = check.max_rel_error < tolerance;
    }

    if (report.worst_parameter.empty() || check.max_rel_error > report.worst_error) {
      report.worst_error = check.max_rel_error;
      report.worst_parameter = check.id;
    }
    report.passed = report.passed && check.passed;
    report.parameters.push_back(std::move(check));
  }
  return report;
}

std::vector<Sample> gradient_check_batch(const ModelConfig& config, std::uint64_t seed) {
  SynthOptions o;
  o.count = 2;
  o.height = config.input_h;
  o.width = config.input_w;
  o.classes = std::min<std::size_t>(config.classes, 5);
  o.seed = seed;
  if (config.input_h % 4 == 0 && config.input_w % 4 == 0 && config.input_channels == 3 && o.classes >= 2) {
    auto set = synth_samples(o);
    for (auto& s : set.samples) {
      for (auto& v : s.mask.labels) v = std::min<std::int32_t>(v, static_cast<std::int32_t>(config.classes) - 1);
    }
    return std::move(set.samples);
  }
  // Extents the shape generator cannot draw: smooth ramps with a diagonal split.
  std::vector<Sample> out;
  for (std::size_t n = 0; n < 2; ++n) {
    Sample s{"ramp" + std::to_string(n), Tensor({config.input_h, config.input_w, config.input_channels}),
             LabelMap(config.input_h, config.input_w)};
    for (std::size_t r = 0; r < config.input_h; ++r) {
      for (std::size_t c = 0; c < config.input_w; ++c) {
        for (std::size_t ch = 0; ch < config.input_channels; ++ch) {
          s.image(r, c, ch) = static_cast<float>((r + 2 * c + 3 * ch + n) % 11) / 10.0f;
        }
        s.mask(r, c) = static_cast<std::int32_t>(((r + c + n) * config.classes) / (config.input_h + config.input_w));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace reseg
