// SPDX-License-Identifier: Apache-2.0
#include "reseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "parallel.hpp"
#include "reseg/errors.hpp"
#include "reseg/metrics.hpp"
#include "reseg/model_io.hpp"

namespace reseg {

namespace fs = std::filesystem;

namespace {
constexpr double kLogFloor = 1e-12;
}

void LossConfig::validate(std::size_t classes) const {
  if (!class_weights.empty()) {
    if (class_weights.size() != classes) {
      throw ConfigError("loss: " + std::to_string(class_weights.size()) + " class weights for " +
                        std::to_string(classes) + " classes");
    }
    for (double w : class_weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss: class weights must be finite and non-negative");
    }
  }
  if (!(l2 >= 0.0) || !std::isfinite(l2)) throw ConfigError("loss: l2 must be finite and non-negative");
}

std::vector<double> median_frequency_weights(std::span<const double> freqs, std::vector<std::string>* warnings) {
  if (freqs.empty()) throw ConfigError("median-frequency weights need at least one class frequency");
  for (double f : freqs) {
    if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("class frequencies must be finite and non-negative");
  }
  std::vector<double> sorted(freqs.begin(), freqs.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  std::vector<double> w(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    if (freqs[k] > 0.0) {
      w[k] = median / freqs[k];
    } else if (warnings) {
      warnings->push_back("class " + std::to_string(k) + " never occurs in the training split; its weight is 0");
    }
  }
  return w;
}

namespace {

template <typename T>
void check_target(const BasicTensor<T>& probs, const LabelMap& target, const LossConfig& cfg) {
  if (probs.rank() != 3 || probs.rows() != target.rows || probs.cols() != target.cols) {
    throw DimensionError("loss: probabilities " + to_string(probs.shape()) + " vs target " +
                         std::to_string(target.rows) + "x" + std::to_string(target.cols));
  }
  const auto k = static_cast<std::int32_t>(probs.channels());
  if (!cfg.class_weights.empty() && cfg.class_weights.size() != probs.channels()) {
    throw DimensionError("loss: class weight count does not match the probability channels");
  }
  for (std::int32_t t : target.labels) {
    if (cfg.void_class && t == *cfg.void_class) continue;
    if (t < 0 || t >= k) throw DimensionError("loss: target label " + std::to_string(t) + " outside [0, " +
                                              std::to_string(k) + ")");
  }
}

std::size_t non_void(const LabelMap& target, const LossConfig& cfg) {
  if (!cfg.void_class) return target.size();
  return static_cast<std::size_t>(
      std::count_if(target.labels.begin(), target.labels.end(), [&](std::int32_t t) { return t != *cfg.void_class; }));
}

}  // namespace

template <typename T>
double weighted_cross_entropy(const BasicTensor<T>& probs, const LabelMap& target, const LossConfig& cfg) {
  check_target(probs, target, cfg);
  const std::size_t n = non_void(target, cfg);
  if (n == 0) return 0.0;
  const std::size_t k = probs.channels();
  double total = 0.0;
  for (std::size_t p = 0; p < target.size(); ++p) {
    const std::int32_t t = target.labels[p];
    if (cfg.void_class && t == *cfg.void_class) continue;
    const double q = static_cast<double>(probs[p * k + static_cast<std::size_t>(t)]);
    total -= cfg.weight(static_cast<std::size_t>(t)) * std::log(std::max(q, kLogFloor));
  }
  return total / static_cast<double>(n);
}

template double weighted_cross_entropy(const BasicTensor<float>&, const LabelMap&, const LossConfig&);
template double weighted_cross_entropy(const BasicTensor<double>&, const LabelMap&, const LossConfig&);

namespace ad {

template <typename T>
Var weighted_cross_entropy(Tape<T>& tape, Var probs, const LabelMap& target, const LossConfig& cfg) {
  const double loss = reseg::weighted_cross_entropy(tape.value(probs), target, cfg);
  const Var self{tape.slot_count()};
  return tape.record("weighted_cross_entropy", BasicTensor<T>::scalar(static_cast<T>(loss)),
                     [self, probs, target, cfg](Tape<T>& t) {
                       const std::size_t n = non_void(target, cfg);
                       if (n == 0) return;
                       const double g = static_cast<double>(t.grad(self)[0]) / static_cast<double>(n);
                       const auto& q = t.value(probs);
                       auto& gq = t.grad(probs);
                       const std::size_t k = q.channels();
                       for (std::size_t p = 0; p < target.size(); ++p) {
                         const std::int32_t lbl = target.labels[p];
                         if (cfg.void_class && lbl == *cfg.void_class) continue;
                         const std::size_t i = p * k + static_cast<std::size_t>(lbl);
                         const double qi = static_cast<double>(q[i]);
                         if (qi <= kLogFloor) continue;
                         gq[i] += static_cast<T>(-g * cfg.weight(static_cast<std::size_t>(lbl)) / qi);
                       }
                     });
}

template Var weighted_cross_entropy(Tape<float>&, Var, const LabelMap&, const LossConfig&);
template Var weighted_cross_entropy(Tape<double>&, Var, const LabelMap&, const LossConfig&);

}  // namespace ad

template <typename T>
BasicAdadeltaState<T> BasicAdadeltaState<T>::zeros(const BasicModel<T>& model, double rho, double eps) {
  BasicAdadeltaState s;
  s.rho = rho;
  s.eps = eps;
  for (const auto& p : model.parameters()) {
    s.sq_grad.emplace(p.id, BasicTensor<T>(p.value.shape()));
    s.sq_update.emplace(p.id, BasicTensor<T>(p.value.shape()));
  }
  return s;
}

template <typename T>
void adadelta_update(BasicModel<T>& model, const GradientMap<T>& grads, BasicAdadeltaState<T>& state,
                     const LossConfig& cfg) {
  for (const auto& p : model.parameters()) {
    auto it = grads.find(p.id);
    if (it == grads.end()) continue;
    if (it->second.shape() != p.value.shape()) {
      throw DimensionError("gradient for '" + p.id + "' has shape " + to_string(it->second.shape()));
    }
    if (!all_finite(it->second)) throw NumericError("gradient for '" + p.id + "' is not finite; step aborted");
  }

  const double rho = state.rho, eps = state.eps;
  for (auto& p : model.parameters()) {
    if (p.frozen) continue;
    auto& eg = state.sq_grad.try_emplace(p.id, p.value.shape()).first->second;
    auto& edx = state.sq_update.try_emplace(p.id, p.value.shape()).first->second;
    auto it = grads.find(p.id);
    const double decay = p.decays ? cfg.l2 : 0.0;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double theta = static_cast<double>(p.value[i]);
      const double g = (it == grads.end() ? 0.0 : static_cast<double>(it->second[i])) + decay * theta;
      const double acc_g = rho * static_cast<double>(eg[i]) + (1.0 - rho) * g * g;
      const double dx = -std::sqrt(static_cast<double>(edx[i]) + eps) / std::sqrt(acc_g + eps) * g;
      const double acc_dx = rho * static_cast<double>(edx[i]) + (1.0 - rho) * dx * dx;
      eg[i] = static_cast<T>(acc_g);
      edx[i] = static_cast<T>(acc_dx);
      p.value[i] = static_cast<T>(theta + dx);
    }
  }
}

template struct BasicAdadeltaState<float>;
template struct BasicAdadeltaState<double>;
template void adadelta_update(BasicModel<float>&, const GradientMap<float>&, BasicAdadeltaState<float>&,
                              const LossConfig&);
template void adadelta_update(BasicModel<double>&, const GradientMap<double>&, BasicAdadeltaState<double>&,
                              const LossConfig&);

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (eval_every < 1) throw ConfigError("train: eval_every must be at least 1");
}

std::vector<std::vector<std::size_t>> partition_batches(std::span<const std::size_t> order, std::size_t batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return out;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

namespace {
std::size_t resolve_threads(std::size_t requested) {
  return requested != 0 ? requested : detail::configured_threads();
}
}  // namespace

template <typename T>
GradientMap<T> batch_gradient(const BasicModel<T>& model, std::span<const Sample* const> batch, const LossConfig& loss,
                              std::size_t threads, double* mean_loss) {
  if (batch.empty()) throw UsageError("batch_gradient: empty batch");
  std::vector<GradientMap<T>> per_image(batch.size());
  std::vector<double> losses(batch.size());
  detail::parallel_for(batch.size(), resolve_threads(threads), [&](std::size_t i) {
    Tape<T> tape;
    const ModelVars vars = model.register_parameters(tape);
    const Var image = tape.constant(batch[i]->image.template cast<T>());
    const Var probs = model.record_forward(tape, vars, image);
    const Var l = ad::weighted_cross_entropy(tape, probs, batch[i]->mask, loss);
    tape.mark_loss(l);
    losses[i] = static_cast<double>(tape.value(l)[0]);
    per_image[i] = tape.backward();
  });
  GradientMap<T> total = std::move(per_image[0]);
  for (std::size_t i = 1; i < per_image.size(); ++i) {
    for (auto& [id, g] : total) axpy(T{1}, per_image[i].at(id), g);
  }
  const T inv = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  for (auto& [id, g] : total) {
    for (auto& v : g.values()) v *= inv;
  }
  if (mean_loss) {
    double s = 0.0;
    for (double l : losses) s += l;
    *mean_loss = s / static_cast<double>(batch.size());
  }
  return total;
}

template GradientMap<float> batch_gradient(const BasicModel<float>&, std::span<const Sample* const>,
                                           const LossConfig&, std::size_t, double*);
template GradientMap<double> batch_gradient(const BasicModel<double>&, std::span<const Sample* const>,
                                            const LossConfig&, std::size_t, double*);

SplitScore score_split(const Model& model, std::span<const Sample> samples, const LossConfig& loss,
                       std::size_t threads) {
  if (samples.empty()) throw ConfigError("cannot score an empty split");
  const std::size_t k = model.config().classes;
  std::vector<ConfusionMatrix> matrices(samples.size(), ConfusionMatrix(k));
  std::vector<double> losses(samples.size());
  detail::parallel_for(samples.size(), resolve_threads(threads), [&](std::size_t i) {
    const Tensor probs = model.forward(samples[i].image);
    losses[i] = weighted_cross_entropy(probs, samples[i].mask, loss);
    matrices[i].accumulate(argmax_labels(probs), samples[i].mask, loss.void_class);
  });
  ConfusionMatrix cm(k);
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    cm += matrices[i];
    total += losses[i];
  }
  SplitScore s;
  s.mean_loss = total / static_cast<double>(samples.size());
  s.global_acc = global_accuracy(cm);
  s.mean_iou = mean_iou(cm).mean;
  return s;
}

namespace {

std::string format_row(const EpochRecord& r) {
  char buf[160];
  if (r.evaluated) {
    std::snprintf(buf, sizeof buf, "%zu,%.8g,%.6f,%.6f,%.3f\n", r.epoch, r.mean_loss, r.global_acc, r.mean_iou,
                  r.wall_seconds);
  } else {
    std::snprintf(buf, sizeof buf, "%zu,%.8g,,,%.3f\n", r.epoch, r.mean_loss, r.wall_seconds);
  }
  return buf;
}

void append_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to '" + path.string() + "'");
  out << text;
}

std::string log_header(const LossConfig& loss) {
  std::string h;
  if (!loss.class_weights.empty()) {
    h += "# class_weights:";
    char buf[32];
    for (double w : loss.class_weights) {
      std::snprintf(buf, sizeof buf, " %.6g", w);
      h += buf;
    }
    h += '\n';
  }
  if (loss.void_class) h += "# void_class: " + std::to_string(*loss.void_class) + "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "# l2: %g\n", loss.l2);
  h += buf;
  h += "epoch,mean_loss,global_acc,mean_iou,wall_seconds\n";
  return h;
}

}  // namespace

TrainResult train(Checkpoint& state, std::span<const Sample> train_set, std::span<const Sample> valid,
                  const TrainConfig& cfg, const LossConfig& loss,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  const ModelConfig& mc = state.model.config();
  loss.validate(mc.classes);
  if (train_set.empty()) throw ConfigError("training split is empty");
  for (const auto& s : train_set) {
    if (s.image.shape() != Shape{mc.input_h, mc.input_w, mc.input_channels}) {
      throw DimensionError("sample '" + s.id + "' has extents " + to_string(s.image.shape()) +
                           ", the model expects " + std::to_string(mc.input_h) + "x" + std::to_string(mc.input_w) +
                           "x" + std::to_string(mc.input_channels));
    }
  }
  if (!state.optimizer) state.optimizer = AdadeltaState::zeros(state.model);
  const std::size_t threads = resolve_threads(cfg.threads);
  const std::span<const Sample> selection = valid.empty() ? train_set : valid;

  const bool files = !cfg.output_dir.empty();
  const fs::path log_path = cfg.output_dir / "log.csv";
  if (files) {
    std::error_code ec;
    fs::create_directories(cfg.output_dir, ec);
    if (ec) throw IoError("cannot create '" + cfg.output_dir.string() + "': " + ec.message());
    if (state.epoch == 0 || !fs::exists(log_path)) {
      std::ofstream out(log_path, std::ios::trunc);
      if (!out) throw IoError("cannot write '" + log_path.string() + "'");
      out << log_header(loss);
    }
    if (state.epoch == 0) {
      save_checkpoint(cfg.output_dir / "last.model", state);
      save_checkpoint(cfg.output_dir / "best.model", state);
    }
  }

  TrainResult result;
  for (std::size_t epoch = state.epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const Model model_before = state.model;
    const AdadeltaState optimizer_before = *state.optimizer;
    EpochRecord rec;
    rec.epoch = epoch;
    try {
      const auto order = epoch_order(train_set.size(), cfg.seed, epoch);
      double loss_sum = 0.0;
      for (const auto& batch : partition_batches(order, cfg.batch_size)) {
        std::vector<const Sample*> members;
        for (std::size_t i : batch) members.push_back(&train_set[i]);
        double batch_loss = 0.0;
        const auto grads = batch_gradient<float>(state.model, members, loss, threads, &batch_loss);
        adadelta_update(state.model, grads, *state.optimizer, loss);
        loss_sum += batch_loss * static_cast<double>(members.size());
      }
      rec.mean_loss = loss_sum / static_cast<double>(train_set.size());
      if (!std::isfinite(rec.mean_loss)) throw NumericError("mean training loss is not finite");

      if (epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs) {
        const SplitScore score = score_split(state.model, selection, loss, threads);
        rec.evaluated = true;
        rec.global_acc = score.global_acc;
        rec.mean_iou = score.mean_iou;
      }
    } catch (const NumericError& e) {
      state.model = model_before;
      state.optimizer = optimizer_before;
      result.aborted = true;
      result.abort_reason = "epoch " + std::to_string(epoch) + ": " + e.what();
      if (files) append_text(log_path, "# aborted at " + result.abort_reason + "\n");
      return result;
    }

    state.epoch = epoch;
    const bool improved = rec.evaluated && rec.mean_iou > state.best_score;
    if (improved) state.best_score = rec.mean_iou;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (files) {
      if (improved) save_checkpoint(cfg.output_dir / "best.model", state);
      save_checkpoint(cfg.output_dir / "last.model", state);
      append_text(log_path, format_row(rec));
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace reseg
