// SPDX-License-Identifier: Apache-2.0
#include "reseg/layers.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <sstream>

#include "parallel.hpp"

namespace reseg {

const char* to_string(Direction d) {
  switch (d) {
    case Direction::down:
      return "down";
    case Direction::up:
      return "up";
    case Direction::right:
      return "right";
    case Direction::left:
      return "left";
  }
  return "?";
}

namespace {

void check_patch_divisibility(const Shape& shape, std::size_t patch_h, std::size_t patch_w) {
  if (shape.size() != 3) throw DimensionError("split_patches: input must be H x W x C, got " + to_string(shape));
  if (patch_h == 0 || patch_w == 0) throw ConfigError("split_patches: patch extents must be positive");
  if (shape[0] % patch_h != 0 || shape[1] % patch_w != 0) {
    std::ostringstream os;
    os << "split_patches: input " << shape[0] << "x" << shape[1] << " is not divisible into " << patch_h << "x"
       << patch_w << " patches; resize the input or choose a patch size that divides it";
    throw ConfigError(os.str());
  }
}

// Copies between an H x W x C map and its I x J x (Hp*Wp*C) patch grid.
template <typename T, bool ToGrid>
void move_patches(const T* src, T* dst, std::size_t h, std::size_t w, std::size_t c, std::size_t ph,
                  std::size_t pw) {
  const std::size_t gi = h / ph, gj = w / pw, len = ph * pw * c;
  for (std::size_t i = 0; i < gi; ++i) {
    for (std::size_t j = 0; j < gj; ++j) {
      for (std::size_t dy = 0; dy < ph; ++dy) {
        for (std::size_t dx = 0; dx < pw; ++dx) {
          const std::size_t map_off = ((i * ph + dy) * w + j * pw + dx) * c;
          const std::size_t grid_off = (i * gj + j) * len + (dy * pw + dx) * c;
          if constexpr (ToGrid) {
            std::copy_n(src + map_off, c, dst + grid_off);
          } else {
            std::copy_n(src + grid_off, c, dst + map_off);
          }
        }
      }
    }
  }
}

template <typename T>
void matvec_acc(std::span<const T> x, const BasicTensor<T>& m, std::vector<T>& out) {
  const std::size_t cols = out.size();
  const T* row = m.data();
  for (std::size_t i = 0; i < x.size(); ++i, row += cols) {
    const T v = x[i];
    if (v == T{0}) continue;
    for (std::size_t k = 0; k < cols; ++k) out[k] += v * row[k];
  }
}

// grad_m += outer(x, g); grad_x += m g
template <typename T>
void matvec_backward(std::span<const T> x, const BasicTensor<T>& m, const std::vector<T>& g, BasicTensor<T>& grad_m,
                     std::span<T> grad_x) {
  const std::size_t cols = g.size();
  const T* row = m.data();
  T* grow = grad_m.data();
  for (std::size_t i = 0; i < x.size(); ++i, row += cols, grow += cols) {
    const T v = x[i];
    T acc = 0;
    for (std::size_t k = 0; k < cols; ++k) {
      grow[k] += v * g[k];
      acc += row[k] * g[k];
    }
    if (!grad_x.empty()) grad_x[i] += acc;
  }
}

template <typename T>
T sigmoid(T a) {
  return T{1} / (T{1} + std::exp(-a));
}

// Position of step t of sequence s in an I x J grid for a given direction.
struct SweepGeometry {
  Direction direction;
  std::size_t rows, cols;

  std::size_t sequences() const { return vertical() ? cols : rows; }
  std::size_t length() const { return vertical() ? rows : cols; }
  bool vertical() const { return direction == Direction::down || direction == Direction::up; }

  std::size_t position(std::size_t s, std::size_t t) const {
    switch (direction) {
      case Direction::down:
        return t * cols + s;
      case Direction::up:
        return (rows - 1 - t) * cols + s;
      case Direction::right:
        return s * cols + t;
      case Direction::left:
        return s * cols + (cols - 1 - t);
    }
    return 0;
  }
};

template <typename T>
void check_sweep_input(const GruParams<T>& gru, const BasicTensor<T>& grid) {
  gru.validate();
  if (grid.rank() != 3) throw DimensionError("directional_sweep: grid must be I x J x D, got " + to_string(grid.shape()));
  if (grid.channels() != gru.input_dim()) {
    std::ostringstream os;
    os << "directional_sweep: grid vector length (axis 2) is " << grid.channels() << " but the GRU expects "
       << gru.input_dim();
    throw DimensionError(os.str());
  }
}

// Runs every sequence of the sweep, writing states into `out` (I x J x U).
// When `steps` is non-null the per-position activations are kept for backward.
template <typename T>
void run_sweep(const GruParams<T>& gru, Direction direction, const BasicTensor<T>& grid, BasicTensor<T>& out,
               std::vector<GruStep<T>>* steps, SweepExecution execution) {
  const SweepGeometry geo{direction, grid.rows(), grid.cols()};
  const std::size_t units = gru.units(), dim = grid.channels();
  if (steps) steps->assign(geo.rows * geo.cols, {});
  const std::vector<T> zero(units, T{0});

  auto run_sequence = [&](std::size_t s) {
    std::span<const T> prev(zero);
    for (std::size_t t = 0; t < geo.length(); ++t) {
      const std::size_t pos = geo.position(s, t);
      GruStep<T> step = gru_step<T>(gru, prev, std::span<const T>(grid.data() + pos * dim, dim));
      T* dst = out.data() + pos * units;
      std::copy(step.state.begin(), step.state.end(), dst);
      prev = std::span<const T>(dst, units);
      if (steps) (*steps)[pos] = std::move(step);
    }
  };

  if (execution == SweepExecution::parallel) {
    detail::parallel_for(geo.sequences(), std::max<std::size_t>(2, detail::configured_threads()), run_sequence);
  } else {
    for (std::size_t s = 0; s < geo.sequences(); ++s) run_sequence(s);
  }
}

}  // namespace

template <typename T>
PatchGrid<T> split_patches(const BasicTensor<T>& x, std::size_t patch_h, std::size_t patch_w) {
  check_patch_divisibility(x.shape(), patch_h, patch_w);
  const std::size_t h = x.rows(), w = x.cols(), c = x.channels();
  PatchGrid<T> grid{BasicTensor<T>({h / patch_h, w / patch_w, patch_h * patch_w * c}), patch_h, patch_w, x.shape()};
  move_patches<T, true>(x.data(), grid.patches.data(), h, w, c, patch_h, patch_w);
  return grid;
}

template <typename T>
BasicTensor<T> merge_patches(const PatchGrid<T>& grid) {
  BasicTensor<T> out(grid.origin);
  move_patches<T, false>(grid.patches.data(), out.data(), grid.origin[0], grid.origin[1], grid.origin[2],
                         grid.patch_h, grid.patch_w);
  return out;
}

template <typename T>
GruParams<T> GruParams<T>::zeros(std::size_t input_dim, std::size_t units) {
  GruParams p;
  p.w_update = p.w_reset = p.w_candidate = BasicTensor<T>({input_dim, units});
  p.r_update = p.r_reset = p.r_candidate = BasicTensor<T>({units, units});
  p.b_update = p.b_reset = p.b_candidate = BasicTensor<T>({units});
  return p;
}

template <typename T>
std::array<BasicTensor<T>*, 9> GruParams<T>::tensors() {
  return {&w_update, &w_reset, &w_candidate, &r_update, &r_reset, &r_candidate, &b_update, &b_reset, &b_candidate};
}

template <typename T>
std::array<const BasicTensor<T>*, 9> GruParams<T>::tensors() const {
  return {&w_update, &w_reset, &w_candidate, &r_update, &r_reset, &r_candidate, &b_update, &b_reset, &b_candidate};
}

template <typename T>
void GruParams<T>::validate() const {
  const std::size_t u = b_update.size();
  const std::size_t in = w_update.rank() == 2 ? w_update.extent(0) : 0;
  const Shape want[9] = {{in, u}, {in, u}, {in, u}, {u, u}, {u, u}, {u, u}, {u}, {u}, {u}};
  auto ts = tensors();
  for (std::size_t k = 0; k < 9; ++k) {
    if (ts[k]->shape() != want[k]) {
      throw DimensionError(std::string("GRU tensor ") + kGruTensorNames[k] + " has shape " +
                           to_string(ts[k]->shape()) + ", expected " + to_string(want[k]));
    }
  }
}

template <typename T>
GruStep<T> gru_step(const GruParams<T>& p, std::span<const T> prev, std::span<const T> input) {
  const std::size_t u = p.units();
  if (prev.size() != u) {
    throw DimensionError("gru_step: state length " + std::to_string(prev.size()) + ", expected " + std::to_string(u));
  }
  if (input.size() != p.input_dim()) {
    throw DimensionError("gru_step: input length " + std::to_string(input.size()) + ", expected " +
                         std::to_string(p.input_dim()));
  }
  GruStep<T> s;
  s.update.assign(p.b_update.values().begin(), p.b_update.values().end());
  s.reset.assign(p.b_reset.values().begin(), p.b_reset.values().end());
  s.candidate.assign(p.b_candidate.values().begin(), p.b_candidate.values().end());
  matvec_acc(input, p.w_update, s.update);
  matvec_acc(prev, p.r_update, s.update);
  matvec_acc(input, p.w_reset, s.reset);
  matvec_acc(prev, p.r_reset, s.reset);
  for (std::size_t k = 0; k < u; ++k) {
    s.update[k] = sigmoid(s.update[k]);
    s.reset[k] = sigmoid(s.reset[k]);
  }
  std::vector<T> gated(u);
  for (std::size_t k = 0; k < u; ++k) gated[k] = s.reset[k] * prev[k];
  matvec_acc(input, p.w_candidate, s.candidate);
  matvec_acc(std::span<const T>(gated), p.r_candidate, s.candidate);
  s.state.resize(u);
  for (std::size_t k = 0; k < u; ++k) {
    s.candidate[k] = std::tanh(s.candidate[k]);
    s.state[k] = (T{1} - s.update[k]) * prev[k] + s.update[k] * s.candidate[k];
  }
  return s;
}

template <typename T>
void gru_step_backward(const GruParams<T>& p, std::span<const T> prev, std::span<const T> input,
                       const GruStep<T>& s, std::span<const T> grad_state, GruParams<T>& g,
                       std::span<T> grad_prev, std::span<T> grad_input) {
  const std::size_t u = p.units();
  std::vector<T> d_update(u), d_cand(u), gated(u);
  for (std::size_t k = 0; k < u; ++k) {
    const T gs = grad_state[k];
    if (!grad_prev.empty()) grad_prev[k] += gs * (T{1} - s.update[k]);
    d_update[k] = gs * (s.candidate[k] - prev[k]) * s.update[k] * (T{1} - s.update[k]);
    d_cand[k] = gs * s.update[k] * (T{1} - s.candidate[k] * s.candidate[k]);
    gated[k] = s.reset[k] * prev[k];
  }

  // candidate path: preact = x Wc + (r*h) Rc + bc
  std::vector<T> d_gated(u, T{0});
  matvec_backward(input, p.w_candidate, d_cand, g.w_candidate, grad_input);
  matvec_backward(std::span<const T>(gated), p.r_candidate, d_cand, g.r_candidate, std::span<T>(d_gated));
  std::vector<T> d_reset(u);
  for (std::size_t k = 0; k < u; ++k) {
    g.b_candidate[k] += d_cand[k];
    if (!grad_prev.empty()) grad_prev[k] += d_gated[k] * s.reset[k];
    d_reset[k] = d_gated[k] * prev[k] * s.reset[k] * (T{1} - s.reset[k]);
  }

  matvec_backward(input, p.w_reset, d_reset, g.w_reset, grad_input);
  matvec_backward(prev, p.r_reset, d_reset, g.r_reset, grad_prev);
  matvec_backward(input, p.w_update, d_update, g.w_update, grad_input);
  matvec_backward(prev, p.r_update, d_update, g.r_update, grad_prev);
  for (std::size_t k = 0; k < u; ++k) {
    g.b_reset[k] += d_reset[k];
    g.b_update[k] += d_update[k];
  }
}

template <typename T>
BasicTensor<T> directional_sweep(const SweepParams<T>& params, const BasicTensor<T>& grid, SweepExecution execution) {
  check_sweep_input(params.gru, grid);
  BasicTensor<T> out({grid.rows(), grid.cols(), params.gru.units()});
  run_sweep<T>(params.gru, params.direction, grid, out, nullptr, execution);
  return out;
}

template <typename T>
void ReNetParams<T>::validate() const {
  if (patch_h == 0 || patch_w == 0) throw ConfigError("ReNet layer patch extents must be positive");
  for (const auto* s : {&down, &up, &right, &left}) s->gru.validate();
  const std::size_t u = down.gru.units();
  for (const auto* s : {&up, &right, &left}) {
    if (s->gru.units() != u) throw DimensionError("ReNet layer sweeps must share the same unit count");
  }
  if (up.gru.input_dim() != down.gru.input_dim()) {
    throw DimensionError("ReNet layer vertical sweeps must read the same patch length");
  }
  if (right.gru.input_dim() != 2 * u || left.gru.input_dim() != 2 * u) {
    throw DimensionError("ReNet layer horizontal sweeps must read 2U = " + std::to_string(2 * u) + " inputs");
  }
}

template <typename T>
BasicTensor<T> renet_layer(const ReNetParams<T>& params, const BasicTensor<T>& x, SweepExecution execution) {
  params.validate();
  const PatchGrid<T> grid = split_patches(x, params.patch_h, params.patch_w);
  const BasicTensor<T> vertical = concat_channels(directional_sweep(params.down, grid.patches, execution),
                                                  directional_sweep(params.up, grid.patches, execution));
  return concat_channels(directional_sweep(params.right, vertical, execution),
                         directional_sweep(params.left, vertical, execution));
}

template <typename T>
BasicTensor<T> upsample_layer(const ConvSpec& spec, const BasicTensor<T>& kernels, const BasicTensor<T>& bias,
                              const BasicTensor<T>& x) {
  return activation(transposed_conv2d(x, spec, kernels, bias), Activation::relu);
}

std::array<std::size_t, 2> frontend_downsampling(const std::vector<FrontendStage>& stages) {
  std::array<std::size_t, 2> factor{1, 1};
  for (const auto& s : stages) {
    if (s.kind == FrontendStage::Kind::pool) {
      factor[0] *= 2;
      factor[1] *= 2;
    } else {
      factor[0] *= s.conv.stride_h;
      factor[1] *= s.conv.stride_w;
    }
  }
  return factor;
}

Shape frontend_output_shape(const std::vector<FrontendStage>& stages, const Shape& input) {
  if (input.size() != 3) throw DimensionError("frontend input must be H x W x C, got " + to_string(input));
  Shape shape = input;
  for (std::size_t n = 0; n < stages.size(); ++n) {
    const auto& s = stages[n];
    if (s.kind == FrontendStage::Kind::pool) {
      if (shape[0] % 2 != 0 || shape[1] % 2 != 0) {
        throw ConfigError("frontend stage " + std::to_string(n) + ": 2x2 pooling needs even extents, got " +
                          to_string(shape));
      }
      shape = {shape[0] / 2, shape[1] / 2, shape[2]};
      continue;
    }
    s.conv.validate();
    if (s.conv.in_channels != shape[2]) {
      throw ConfigError("frontend stage " + std::to_string(n) + ": expects " + std::to_string(s.conv.in_channels) +
                        " input channels, receives " + std::to_string(shape[2]));
    }
    const std::size_t pad_h = s.conv.padding.top + s.conv.padding.bottom;
    const std::size_t pad_w = s.conv.padding.left + s.conv.padding.right;
    if (shape[0] + pad_h < s.conv.kernel_h || shape[1] + pad_w < s.conv.kernel_w) {
      throw ConfigError("frontend stage " + std::to_string(n) + ": kernel larger than its input " + to_string(shape));
    }
    shape = {(shape[0] + pad_h - s.conv.kernel_h) / s.conv.stride_h + 1,
             (shape[1] + pad_w - s.conv.kernel_w) / s.conv.stride_w + 1, s.conv.out_channels};
  }
  return shape;
}

template <typename T>
BasicTensor<T> conv_frontend(const FrontendParams<T>& params, const BasicTensor<T>& x) {
  BasicTensor<T> h = x;
  std::size_t conv_index = 0;
  for (const auto& s : params.stages) {
    if (s.kind == FrontendStage::Kind::pool) {
      h = max_pool2x2(h).output;
    } else {
      h = activation(conv2d(h, s.conv, params.kernels.at(conv_index), params.biases.at(conv_index)), Activation::relu);
      ++conv_index;
    }
  }
  return h;
}

namespace ad {

template <typename T>
Var split_patches(Tape<T>& tape, Var x, std::size_t patch_h, std::size_t patch_w) {
  const Shape origin = tape.value(x).shape();
  BasicTensor<T> patches = reseg::split_patches(tape.value(x), patch_h, patch_w).patches;
  const Var self{tape.slot_count()};
  return tape.record("split_patches", std::move(patches), [=](Tape<T>& t) {
    BasicTensor<T>& gx = t.grad(x);
    BasicTensor<T> scattered(origin);
    move_patches<T, false>(t.grad(self).data(), scattered.data(), origin[0], origin[1], origin[2], patch_h, patch_w);
    axpy(T{1}, scattered, gx);
  });
}

template <typename T>
Var directional_sweep(Tape<T>& tape, const GruVars& vars, Direction direction, Var grid, SweepExecution execution) {
  struct SweepState {
    GruParams<T> params;
    GruParams<T> grads;
    std::vector<GruStep<T>> steps;
    std::vector<T> zero;
    std::vector<T> discard;
  };
  auto st = std::make_shared<SweepState>();
  {
    auto dst = st->params.tensors();
    for (std::size_t k = 0; k < 9; ++k) *dst[k] = tape.value(vars[k]);
  }
  check_sweep_input(st->params, tape.value(grid));
  const std::size_t units = st->params.units(), dim = st->params.input_dim();
  st->grads = GruParams<T>::zeros(dim, units);
  st->zero.assign(units, T{0});
  st->discard.assign(units, T{0});

  // Recorded first so it runs after every step during backward.
  tape.record_effect("sweep.flush", [st, vars](Tape<T>& t) {
    auto g = st->grads.tensors();
    for (std::size_t k = 0; k < 9; ++k) axpy(T{1}, *g[k], t.grad(vars[k]));
  });

  const BasicTensor<T>& grid_value = tape.value(grid);
  const SweepGeometry geo{direction, grid_value.rows(), grid_value.cols()};
  Var out = tape.reserve(std::string("sweep.") + to_string(direction), {geo.rows, geo.cols, units});
  run_sweep<T>(st->params, direction, tape.value(grid), tape.mutable_value(out), &st->steps, execution);

  for (std::size_t s = 0; s < geo.sequences(); ++s) {
    for (std::size_t t = 0; t < geo.length(); ++t) {
      tape.record_effect("gru_step", [st, geo, s, t, grid, out, units, dim](Tape<T>& tp) {
        const std::size_t pos = geo.position(s, t);
        std::span<const T> prev(st->zero);
        std::span<T> grad_prev(st->discard);
        BasicTensor<T>& grad_out = tp.grad(out);
        if (t > 0) {
          const std::size_t prev_pos = geo.position(s, t - 1);
          prev = std::span<const T>(tp.value(out).data() + prev_pos * units, units);
          grad_prev = std::span<T>(grad_out.data() + prev_pos * units, units);
        }
        gru_step_backward<T>(st->params, prev, std::span<const T>(tp.value(grid).data() + pos * dim, dim),
                             st->steps[pos], std::span<const T>(grad_out.data() + pos * units, units), st->grads,
                             grad_prev, std::span<T>(tp.grad(grid).data() + pos * dim, dim));
      });
    }
  }

  // Recorded last so it runs first: backward() may be called repeatedly.
  tape.record_effect("sweep.begin_backward", [st](Tape<T>&) {
    for (auto* g : st->grads.tensors()) g->fill(T{0});
  });
  return out;
}

template <typename T>
Var renet_layer(Tape<T>& tape, const ReNetVars& vars, Var x, SweepExecution execution) {
  const Var grid = ad::split_patches(tape, x, vars.patch_h, vars.patch_w);
  const Var vertical = ad::concat_channels(tape, ad::directional_sweep(tape, vars.down, Direction::down, grid, execution),
                                           ad::directional_sweep(tape, vars.up, Direction::up, grid, execution));
  return ad::concat_channels(tape, ad::directional_sweep(tape, vars.right, Direction::right, vertical, execution),
                             ad::directional_sweep(tape, vars.left, Direction::left, vertical, execution));
}

template <typename T>
Var upsample_layer(Tape<T>& tape, const ConvSpec& spec, Var kernels, Var bias, Var x) {
  return ad::activation(tape, ad::transposed_conv2d(tape, x, spec, kernels, bias), Activation::relu);
}

template <typename T>
Var conv_frontend(Tape<T>& tape, const std::vector<FrontendStage>& stages, const std::vector<Var>& kernels,
                  const std::vector<Var>& biases, Var x) {
  Var h = x;
  std::size_t conv_index = 0;
  for (const auto& s : stages) {
    if (s.kind == FrontendStage::Kind::pool) {
      h = ad::max_pool2x2(tape, h);
    } else {
      h = ad::activation(tape, ad::conv2d(tape, h, s.conv, kernels.at(conv_index), biases.at(conv_index)),
                         Activation::relu);
      ++conv_index;
    }
  }
  return h;
}

}  // namespace ad

#define RESEG_INSTANTIATE_LAYERS(T)                                                                              \
  template struct GruParams<T>;                                                                                  \
  template struct ReNetParams<T>;                                                                                \
  template PatchGrid<T> split_patches(const BasicTensor<T>&, std::size_t, std::size_t);                          \
  template BasicTensor<T> merge_patches(const PatchGrid<T>&);                                                    \
  template GruStep<T> gru_step(const GruParams<T>&, std::span<const T>, std::span<const T>);                     \
  template void gru_step_backward(const GruParams<T>&, std::span<const T>, std::span<const T>,                   \
                                  const GruStep<T>&, std::span<const T>, GruParams<T>&, std::span<T>,            \
                                  std::span<T>);                                                                 \
  template BasicTensor<T> directional_sweep(const SweepParams<T>&, const BasicTensor<T>&, SweepExecution);       \
  template BasicTensor<T> renet_layer(const ReNetParams<T>&, const BasicTensor<T>&, SweepExecution);             \
  template BasicTensor<T> upsample_layer(const ConvSpec&, const BasicTensor<T>&, const BasicTensor<T>&,          \
                                         const BasicTensor<T>&);                                                 \
  template BasicTensor<T> conv_frontend(const FrontendParams<T>&, const BasicTensor<T>&);                        \
  template Var ad::split_patches(Tape<T>&, Var, std::size_t, std::size_t);                                       \
  template Var ad::directional_sweep(Tape<T>&, const ad::GruVars&, Direction, Var, SweepExecution);              \
  template Var ad::renet_layer(Tape<T>&, const ad::ReNetVars&, Var, SweepExecution);                             \
  template Var ad::upsample_layer(Tape<T>&, const ConvSpec&, Var, Var, Var);                                     \
  template Var ad::conv_frontend(Tape<T>&, const std::vector<FrontendStage>&, const std::vector<Var>&,           \
                                 const std::vector<Var>&, Var);

RESEG_INSTANTIATE_LAYERS(float)
RESEG_INSTANTIATE_LAYERS(double)

#undef RESEG_INSTANTIATE_LAYERS

}  // namespace reseg
