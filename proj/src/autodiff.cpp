// SPDX-License-Identifier: Apache-2.0
#include "reseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <sstream>

namespace reseg {

namespace {
constexpr std::size_t npos = static_cast<std::size_t>(-1);
}

template <typename T>
std::size_t Tape<T>::push_value(BasicTensor<T> value) {
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

template <typename T>
void Tape<T>::check_slot(Var v) const {
  if (v.slot >= values_.size()) throw UsageError("tape: variable does not belong to this tape");
}

template <typename T>
Var Tape<T>::constant(BasicTensor<T> value) {
  return Var{push_value(std::move(value))};
}

template <typename T>
Var Tape<T>::parameter(std::string id, BasicTensor<T> value, bool frozen) {
  for (const auto& p : params_) {
    if (p.id == id) throw UsageError("tape: parameter '" + id + "' registered twice");
  }
  const std::size_t slot = push_value(std::move(value));
  params_.push_back({std::move(id), slot, frozen});
  return Var{slot};
}

template <typename T>
Var Tape<T>::record(std::string op, BasicTensor<T> value, Backward backward) {
  const std::size_t slot = push_value(std::move(value));
  nodes_.push_back({std::move(op), slot, std::move(backward)});
  return Var{slot};
}

template <typename T>
Var Tape<T>::reserve(std::string op, Shape shape) {
  const std::size_t slot = push_value(BasicTensor<T>(std::move(shape)));
  nodes_.push_back({std::move(op), slot, {}});
  return Var{slot};
}

template <typename T>
void Tape<T>::record_effect(std::string op, Backward backward) {
  nodes_.push_back({std::move(op), npos, std::move(backward)});
}

template <typename T>
const BasicTensor<T>& Tape<T>::value(Var v) const {
  check_slot(v);
  return values_[v.slot];
}

template <typename T>
BasicTensor<T>& Tape<T>::mutable_value(Var v) {
  check_slot(v);
  return values_[v.slot];
}

template <typename T>
BasicTensor<T>& Tape<T>::grad(Var v) {
  if (v.slot >= grads_.size()) throw UsageError("tape: gradient requested before backward()");
  return grads_[v.slot];
}

template <typename T>
const BasicTensor<T>& Tape<T>::grad(Var v) const {
  if (v.slot >= grads_.size()) throw UsageError("tape: gradient requested before backward()");
  return grads_[v.slot];
}

template <typename T>
void Tape<T>::mark_loss(Var v) {
  check_slot(v);
  if (values_[v.slot].size() != 1) {
    throw UsageError("tape: loss root must be a scalar, got shape " + to_string(values_[v.slot].shape()));
  }
  loss_ = v;
}

template <typename T>
GradientMap<T> Tape<T>::backward() {
  if (!has_loss()) throw UsageError("tape: backward() called without a marked loss root");

  for (std::size_t n = 0; n < nodes_.size(); ++n) {
    const auto& node = nodes_[n];
    if (node.slot != npos && !all_finite(values_[node.slot])) {
      throw NumericError("operation #" + std::to_string(n) + " (" + node.op + ") produced a non-finite value");
    }
  }
  if (!std::isfinite(values_[loss_.slot][0])) throw NumericError("loss root is not finite");

  grads_.clear();
  grads_.reserve(values_.size());
  for (const auto& v : values_) grads_.emplace_back(v.shape());
  grads_[loss_.slot][0] = T{1};

  for (std::size_t n = nodes_.size(); n-- > 0;) {
    auto& node = nodes_[n];
    if (node.slot != npos && !all_finite(grads_[node.slot])) {
      throw NumericError("gradient flowing into operation #" + std::to_string(n) + " (" + node.op +
                         ") is non-finite");
    }
    if (node.backward) node.backward(*this);
  }

  GradientMap<T> out;
  for (const auto& p : params_) {
    if (p.frozen) {
      out.emplace(p.id, BasicTensor<T>(values_[p.slot].shape()));
    } else {
      out.emplace(p.id, grads_[p.slot]);
    }
  }
  return out;
}

namespace ad {

// The closure needs the slot of the value it is attached to; record() assigns
// the next free slot, so it is known before the call.
namespace {
template <typename T>
Var record_with(Tape<T>& tape, const char* op, BasicTensor<T> value,
                std::function<void(Tape<T>&, Var)> backward) {
  const Var self{tape.slot_count()};
  return tape.record(op, std::move(value), [self, bw = std::move(backward)](Tape<T>& t) { bw(t, self); });
}
}  // namespace

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  BasicTensor<T> out = tape.value(a);
  axpy(T{1}, tape.value(b), out);
  return record_with<T>(tape, "add", std::move(out), [a, b](Tape<T>& t, Var self) {
    axpy(T{1}, t.grad(self), t.grad(a));
    axpy(T{1}, t.grad(self), t.grad(b));
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  BasicTensor<T> out = tape.value(a);
  for (auto& v : out.values()) v *= factor;
  return record_with<T>(tape, "scale", std::move(out),
                        [a, factor](Tape<T>& t, Var self) { axpy(factor, t.grad(self), t.grad(a)); });
}

template <typename T>
Var sum(Tape<T>& tape, Var a) {
  T total = 0;
  for (T v : tape.value(a).values()) total += v;
  return record_with<T>(tape, "sum", BasicTensor<T>::scalar(total), [a](Tape<T>& t, Var self) {
    const T g = t.grad(self)[0];
    for (auto& v : t.grad(a).values()) v += g;
  });
}

template <typename T>
Var activation(Tape<T>& tape, Var x, Activation kind) {
  return record_with<T>(tape, "activation", reseg::activation(tape.value(x), kind),
                        [x, kind](Tape<T>& t, Var self) {
                          axpy(T{1}, activation_backward(t.value(self), t.grad(self), kind), t.grad(x));
                        });
}

template <typename T>
Var conv2d(Tape<T>& tape, Var x, const ConvSpec& spec, Var kernels, Var bias) {
  return record_with<T>(tape, "conv2d", reseg::conv2d(tape.value(x), spec, tape.value(kernels), tape.value(bias)),
                        [x, spec, kernels, bias](Tape<T>& t, Var self) {
                          BasicTensor<T> gx, gk, gb;
                          conv2d_backward(t.value(x), spec, t.value(kernels), t.grad(self), &gx, &gk, &gb);
                          axpy(T{1}, gx, t.grad(x));
                          axpy(T{1}, gk, t.grad(kernels));
                          axpy(T{1}, gb, t.grad(bias));
                        });
}

template <typename T>
Var transposed_conv2d(Tape<T>& tape, Var x, const ConvSpec& spec, Var kernels, Var bias) {
  return record_with<T>(tape, "transposed_conv2d",
                        reseg::transposed_conv2d(tape.value(x), spec, tape.value(kernels), tape.value(bias)),
                        [x, spec, kernels, bias](Tape<T>& t, Var self) {
                          BasicTensor<T> gx, gk, gb;
                          transposed_conv2d_backward(t.value(x), spec, t.value(kernels), t.grad(self), &gx, &gk,
                                                     &gb);
                          axpy(T{1}, gx, t.grad(x));
                          axpy(T{1}, gk, t.grad(kernels));
                          axpy(T{1}, gb, t.grad(bias));
                        });
}

template <typename T>
Var concat_channels(Tape<T>& tape, Var a, Var b) {
  const std::size_t ca = tape.value(a).channels();
  const std::size_t cb = tape.value(b).channels();
  return record_with<T>(tape, "concat_channels", reseg::concat_channels(tape.value(a), tape.value(b)),
                        [a, b, ca, cb](Tape<T>& t, Var self) {
                          axpy(T{1}, slice_channels(t.grad(self), 0, ca), t.grad(a));
                          axpy(T{1}, slice_channels(t.grad(self), ca, cb), t.grad(b));
                        });
}

template <typename T>
Var softmax_channels(Tape<T>& tape, Var logits) {
  return record_with<T>(tape, "softmax_channels", reseg::softmax_channels(tape.value(logits)),
                        [logits](Tape<T>& t, Var self) {
                          axpy(T{1}, softmax_channels_backward(t.value(self), t.grad(self)), t.grad(logits));
                        });
}

template <typename T>
Var max_pool2x2(Tape<T>& tape, Var x) {
  auto pooled = reseg::max_pool2x2(tape.value(x));
  auto argmax = std::make_shared<std::vector<std::size_t>>(std::move(pooled.argmax));
  return record_with<T>(tape, "max_pool2x2", std::move(pooled.output), [x, argmax](Tape<T>& t, Var self) {
    axpy(T{1}, max_pool2x2_backward(t.value(x).shape(), *argmax, t.grad(self)), t.grad(x));
  });
}

template <typename T>
Var half_squared_norm(Tape<T>& tape, const std::vector<Var>& xs, T coefficient) {
  double total = 0.0;
  for (Var x : xs) total += dot(tape.value(x), tape.value(x));
  return record_with<T>(tape, "half_squared_norm", BasicTensor<T>::scalar(static_cast<T>(0.5 * coefficient * total)),
                        [xs, coefficient](Tape<T>& t, Var self) {
                          const T g = t.grad(self)[0] * coefficient;
                          for (Var x : xs) axpy(g, t.value(x), t.grad(x));
                        });
}

}  // namespace ad

TensorD finite_difference_grad(const std::function<double(const TensorD&)>& evaluate, const TensorD& params,
                               double epsilon, const std::vector<std::size_t>& coords) {
  if (!(epsilon > 0.0)) throw UsageError("finite_difference_grad: epsilon must be positive");
  const double base_a = evaluate(params);
  const double base_b = evaluate(params);
  if (std::memcmp(&base_a, &base_b, sizeof(double)) != 0) {
    throw DeterminismError("finite_difference_grad: two evaluations at the same point disagree");
  }

  std::vector<std::size_t> all;
  const std::vector<std::size_t>* targets = &coords;
  if (coords.empty()) {
    all.resize(params.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    targets = &all;
  }

  TensorD grad(params.shape());
  TensorD probe = params;
  for (std::size_t i : *targets) {
    if (i >= params.size()) throw DimensionError("finite_difference_grad: coordinate out of range");
    const double theta = params[i];
    const double h = epsilon * std::max(std::abs(theta), 1.0);
    probe[i] = theta + h;
    const double up = evaluate(probe);
    probe[i] = theta - h;
    const double down = evaluate(probe);
    probe[i] = theta;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

std::string GradientReport::to_table() const {
  std::size_t width = 9;
  for (const auto& p : parameters) width = std::max(width, p.id.size());
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-*s  %7s  %7s  %12s  %12s  %12s  %s\n", static_cast<int>(width), "parameter",
                "checked", "refined", "max_rel_err", "mean_rel_err", "max|grad|", "status");
  os << line;
  for (const auto& p : parameters) {
    const char* status = p.frozen ? (p.passed ? "frozen" : "FROZEN-NONZERO") : (p.passed ? "ok" : "FAIL");
    std::snprintf(line, sizeof line, "%-*s  %7zu  %7zu  %12.3e  %12.3e  %12.3e  %s\n", static_cast<int>(width),
                  p.id.c_str(), p.checked, p.refined, p.max_rel_error, p.mean_rel_error, p.max_abs_analytic, status);
    os << line;
  }
  std::snprintf(line, sizeof line, "tolerance %.3e  worst %s (%.3e)  result %s\n", tolerance,
                worst_parameter.empty() ? "-" : worst_parameter.c_str(), worst_error, passed ? "PASS" : "FAIL");
  os << line;
  return os.str();
}

#define RESEG_INSTANTIATE_AD(T)                                                           \
  template class Tape<T>;                                                                 \
  template Var ad::add(Tape<T>&, Var, Var);                                               \
  template Var ad::scale(Tape<T>&, Var, T);                                               \
  template Var ad::sum(Tape<T>&, Var);                                                    \
  template Var ad::activation(Tape<T>&, Var, Activation);                                 \
  template Var ad::conv2d(Tape<T>&, Var, const ConvSpec&, Var, Var);                      \
  template Var ad::transposed_conv2d(Tape<T>&, Var, const ConvSpec&, Var, Var);           \
  template Var ad::concat_channels(Tape<T>&, Var, Var);                                   \
  template Var ad::softmax_channels(Tape<T>&, Var);                                       \
  template Var ad::max_pool2x2(Tape<T>&, Var);                                            \
  template Var ad::half_squared_norm(Tape<T>&, const std::vector<Var>&, T);

RESEG_INSTANTIATE_AD(float)
RESEG_INSTANTIATE_AD(double)

#undef RESEG_INSTANTIATE_AD

}  // namespace reseg
