// SPDX-License-Identifier: Apache-2.0
#include "reseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace reseg {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw DimensionError("tensor extent on axis " + std::to_string(i) + " is zero (shape " +
                           to_string(shape) + ")");
    }
  }
}

template <typename T>
void require_rank(const BasicTensor<T>& x, std::size_t rank, const char* op, const char* what) {
  if (x.rank() != rank) {
    std::ostringstream os;
    os << op << ": " << what << " must have rank " << rank << ", got shape " << to_string(x.shape());
    throw DimensionError(os.str());
  }
}

void require_equal(std::size_t got, std::size_t want, const char* op, const char* what) {
  if (got != want) {
    std::ostringstream os;
    os << op << ": " << what << " is " << got << " but " << want << " is required";
    throw DimensionError(os.str());
  }
}

template <typename T>
void check_conv_operands(const BasicTensor<T>& kernels, const BasicTensor<T>& bias, const ConvSpec& spec,
                         std::size_t bias_len, const char* op) {
  spec.validate();
  if (kernels.shape() != spec.kernel_shape()) {
    throw DimensionError(std::string(op) + ": kernel shape " + to_string(kernels.shape()) +
                         " does not match spec " + to_string(spec.kernel_shape()));
  }
  require_equal(bias.size(), bias_len, op, "bias length");
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor() : shape_{1}, data_(1, T{0}) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_size(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
  check_extents(shape_);
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor of shape " + to_string(shape_) + " needs " + std::to_string(shape_size(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

template <typename T>
std::size_t BasicTensor<T>::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  return BasicTensor(std::move(shape), data_);
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

void ConvSpec::validate() const {
  if (kernel_h == 0 || kernel_w == 0 || in_channels == 0 || out_channels == 0 || stride_h == 0 ||
      stride_w == 0) {
    throw ConfigError("convolution spec has a zero kernel extent, channel count or stride");
  }
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad_lo,
                               std::size_t pad_hi, const char* axis) {
  const std::size_t padded = in + pad_lo + pad_hi;
  if (padded < kernel) {
    std::ostringstream os;
    os << "conv2d: " << axis << " extent " << in << " (padded " << padded << ") is smaller than kernel " << kernel;
    throw DimensionError(os.str());
  }
  return (padded - kernel) / stride + 1;
}

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvSpec& spec, const BasicTensor<T>& kernels,
                      const BasicTensor<T>& bias) {
  require_rank(input, 3, "conv2d", "input");
  check_conv_operands(kernels, bias, spec, spec.out_channels, "conv2d");
  require_equal(input.channels(), spec.in_channels, "conv2d", "input channels (axis 2)");

  const std::size_t h = input.rows(), w = input.cols(), c_in = spec.in_channels, c_out = spec.out_channels;
  const std::size_t oh = conv_output_extent(h, spec.kernel_h, spec.stride_h, spec.padding.top, spec.padding.bottom, "rows (axis 0)");
  const std::size_t ow = conv_output_extent(w, spec.kernel_w, spec.stride_w, spec.padding.left, spec.padding.right, "cols (axis 1)");

  BasicTensor<T> out({oh, ow, c_out});
  // Accumulate in double so float maps round once per output.
  std::vector<double> acc(c_out);
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t f = 0; f < c_out; ++f) acc[f] = bias[f];
      for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride_h + ky) -
                                  static_cast<std::ptrdiff_t>(spec.padding.top);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride_w + kx) -
                                    static_cast<std::ptrdiff_t>(spec.padding.left);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const T* src = &input(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          const T* k = &kernels[((ky * spec.kernel_w + kx) * c_in) * c_out];
          for (std::size_t c = 0; c < c_in; ++c) {
            const double v = src[c];
            const T* krow = k + c * c_out;
            for (std::size_t f = 0; f < c_out; ++f) acc[f] += v * krow[f];
          }
        }
      }
      T* dst = &out(oy, ox, 0);
      for (std::size_t f = 0; f < c_out; ++f) dst[f] = static_cast<T>(acc[f]);
    }
  }
  return out;
}

template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const ConvSpec& spec, const BasicTensor<T>& kernels,
                     const BasicTensor<T>& grad_output, BasicTensor<T>* grad_input, BasicTensor<T>* grad_kernels,
                     BasicTensor<T>* grad_bias) {
  const std::size_t h = input.rows(), w = input.cols(), c_in = spec.in_channels, c_out = spec.out_channels;
  const std::size_t oh = grad_output.rows(), ow = grad_output.cols();
  if (grad_input) *grad_input = BasicTensor<T>(input.shape());
  if (grad_kernels) *grad_kernels = BasicTensor<T>(kernels.shape());
  if (grad_bias) *grad_bias = BasicTensor<T>({c_out});

  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* go = &grad_output(oy, ox, 0);
      if (grad_bias) {
        for (std::size_t f = 0; f < c_out; ++f) (*grad_bias)[f] += go[f];
      }
      for (std::size_t ky = 0; ky < spec.kernel_h; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride_h + ky) -
                                  static_cast<std::ptrdiff_t>(spec.padding.top);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < spec.kernel_w; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * spec.stride_w + kx) -
                                    static_cast<std::ptrdiff_t>(spec.padding.left);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t kbase = ((ky * spec.kernel_w + kx) * c_in) * c_out;
          const std::size_t uy = static_cast<std::size_t>(iy), ux = static_cast<std::size_t>(ix);
          for (std::size_t c = 0; c < c_in; ++c) {
            const T* krow = &kernels[kbase + c * c_out];
            if (grad_input) {
              T acc = 0;
              for (std::size_t f = 0; f < c_out; ++f) acc += go[f] * krow[f];
              (*grad_input)(uy, ux, c) += acc;
            }
            if (grad_kernels) {
              const T v = input(uy, ux, c);
              T* gk = &(*grad_kernels)[kbase + c * c_out];
              for (std::size_t f = 0; f < c_out; ++f) gk[f] += v * go[f];
            }
          }
        }
      }
    }
  }
}

namespace {

void require_tied(const ConvSpec& spec, const char* op) {
  if (!spec.is_tied()) {
    std::ostringstream os;
    os << op << ": stride must equal the filter size with no padding (kernel " << spec.kernel_h << "x"
       << spec.kernel_w << ", stride " << spec.stride_h << "x" << spec.stride_w << ")";
    throw ConfigError(os.str());
  }
}

}  // namespace

template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& input, const ConvSpec& spec, const BasicTensor<T>& kernels,
                                 const BasicTensor<T>& bias) {
  require_rank(input, 3, "transposed_conv2d", "input");
  require_tied(spec, "transposed_conv2d");
  check_conv_operands(kernels, bias, spec, spec.in_channels, "transposed_conv2d");
  require_equal(input.channels(), spec.out_channels, "transposed_conv2d", "input channels (axis 2)");

  const std::size_t in_h = input.rows(), in_w = input.cols();
  const std::size_t kh = spec.kernel_h, kw = spec.kernel_w;
  const std::size_t c_feat = spec.out_channels, c_res = spec.in_channels;
  BasicTensor<T> out({in_h * kh, in_w * kw, c_res});
  for (std::size_t i = 0; i < in_h; ++i) {
    for (std::size_t j = 0; j < in_w; ++j) {
      const T* src = &input(i, j, 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T* dst = &out(i * kh + ky, j * kw + kx, 0);
          const T* k = &kernels[((ky * kw + kx) * c_res) * c_feat];
          for (std::size_t c = 0; c < c_res; ++c) {
            const T* krow = k + c * c_feat;
            double acc = bias[c];
            for (std::size_t f = 0; f < c_feat; ++f) acc += static_cast<double>(src[f]) * krow[f];
            dst[c] = static_cast<T>(acc);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
void transposed_conv2d_backward(const BasicTensor<T>& input, const ConvSpec& spec, const BasicTensor<T>& kernels,
                                const BasicTensor<T>& grad_output, BasicTensor<T>* grad_input,
                                BasicTensor<T>* grad_kernels, BasicTensor<T>* grad_bias) {
  const std::size_t in_h = input.rows(), in_w = input.cols();
  const std::size_t kh = spec.kernel_h, kw = spec.kernel_w;
  const std::size_t c_feat = spec.out_channels, c_res = spec.in_channels;
  if (grad_input) *grad_input = BasicTensor<T>(input.shape());
  if (grad_kernels) *grad_kernels = BasicTensor<T>(kernels.shape());
  if (grad_bias) *grad_bias = BasicTensor<T>({c_res});

  for (std::size_t i = 0; i < in_h; ++i) {
    for (std::size_t j = 0; j < in_w; ++j) {
      const T* src = &input(i, j, 0);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const T* go = &grad_output(i * kh + ky, j * kw + kx, 0);
          const std::size_t kbase = ((ky * kw + kx) * c_res) * c_feat;
          for (std::size_t c = 0; c < c_res; ++c) {
            const T g = go[c];
            if (grad_bias) (*grad_bias)[c] += g;
            const T* krow = &kernels[kbase + c * c_feat];
            if (grad_input) {
              T* gi = &(*grad_input)(i, j, 0);
              for (std::size_t f = 0; f < c_feat; ++f) gi[f] += g * krow[f];
            }
            if (grad_kernels) {
              T* gk = &(*grad_kernels)[kbase + c * c_feat];
              for (std::size_t f = 0; f < c_feat; ++f) gk[f] += g * src[f];
            }
          }
        }
      }
    }
  }
}

template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits) {
  require_rank(logits, 3, "softmax_channels", "logits");
  if (!all_finite(logits)) throw NumericError("softmax_channels: non-finite logit");
  BasicTensor<T> out(logits.shape());
  const std::size_t k = logits.channels();
  const std::size_t pixels = logits.rows() * logits.cols();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* z = logits.data() + p * k;
    T* y = out.data() + p * k;
    const T mx = *std::max_element(z, z + k);
    T total = 0;
    for (std::size_t c = 0; c < k; ++c) {
      y[c] = std::exp(z[c] - mx);
      total += y[c];
    }
    for (std::size_t c = 0; c < k; ++c) y[c] /= total;
  }
  return out;
}

template <typename T>
BasicTensor<T> softmax_channels_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs) {
  BasicTensor<T> out(probs.shape());
  const std::size_t k = probs.channels();
  const std::size_t pixels = probs.rows() * probs.cols();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* y = probs.data() + p * k;
    const T* g = grad_probs.data() + p * k;
    T s = 0;
    for (std::size_t c = 0; c < k; ++c) s += y[c] * g[c];
    T* d = out.data() + p * k;
    for (std::size_t c = 0; c < k; ++c) d[c] = y[c] * (g[c] - s);
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_rank(a, 3, "concat_channels", "first operand");
  require_rank(b, 3, "concat_channels", "second operand");
  require_equal(b.rows(), a.rows(), "concat_channels", "rows (axis 0) of second operand");
  require_equal(b.cols(), a.cols(), "concat_channels", "cols (axis 1) of second operand");
  const std::size_t ca = a.channels(), cb = b.channels();
  BasicTensor<T> out({a.rows(), a.cols(), ca + cb});
  const std::size_t pixels = a.rows() * a.cols();
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(a.data() + p * ca, ca, out.data() + p * (ca + cb));
    std::copy_n(b.data() + p * cb, cb, out.data() + p * (ca + cb) + ca);
  }
  return out;
}

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t count) {
  require_rank(x, 3, "slice_channels", "input");
  if (count == 0 || begin + count > x.channels()) {
    throw DimensionError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") exceeds " + std::to_string(x.channels()) + " channels (axis 2)");
  }
  BasicTensor<T> out({x.rows(), x.cols(), count});
  const std::size_t pixels = x.rows() * x.cols();
  for (std::size_t p = 0; p < pixels; ++p) {
    std::copy_n(x.data() + p * x.channels() + begin, count, out.data() + p * count);
  }
  return out;
}

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& x, Activation kind) {
  BasicTensor<T> out(x.shape());
  auto src = x.values();
  auto dst = out.values();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > T{0} ? src[i] : T{0};
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = std::tanh(src[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = T{1} / (T{1} + std::exp(-src[i]));
      break;
  }
  return out;
}

template <typename T>
BasicTensor<T> activation_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_output, Activation kind) {
  BasicTensor<T> out(output.shape());
  auto y = output.values();
  auto g = grad_output.values();
  auto d = out.values();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < y.size(); ++i) d[i] = y[i] > T{0} ? g[i] : T{0};
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < y.size(); ++i) d[i] = g[i] * (T{1} - y[i] * y[i]);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < y.size(); ++i) d[i] = g[i] * y[i] * (T{1} - y[i]);
      break;
  }
  return out;
}

template <typename T>
PoolResult<T> max_pool2x2(const BasicTensor<T>& x) {
  require_rank(x, 3, "max_pool2x2", "input");
  if (x.rows() % 2 != 0 || x.cols() % 2 != 0) {
    throw ConfigError("max_pool2x2: extents " + to_string(x.shape()) + " are not divisible by 2");
  }
  const std::size_t oh = x.rows() / 2, ow = x.cols() / 2, c = x.channels();
  PoolResult<T> r{BasicTensor<T>({oh, ow, c}), std::vector<std::size_t>(oh * ow * c)};
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        std::size_t best = ((2 * i) * x.cols() + 2 * j) * c + ch;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = ((2 * i + dy) * x.cols() + 2 * j + dx) * c + ch;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (i * ow + j) * c + ch;
        r.output[o] = x[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> max_pool2x2_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                                    const BasicTensor<T>& grad_output) {
  BasicTensor<T> out(input_shape);
  for (std::size_t o = 0; o < argmax.size(); ++o) out[argmax[o]] += grad_output[o];
  return out;
}

template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: operand sizes " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                         " differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <typename T>
bool all_finite(std::span<const T> values) {
  return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void axpy(T scale, const BasicTensor<T>& b, BasicTensor<T>& a) {
  if (a.shape() != b.shape()) {
    throw DimensionError("axpy: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

#define RESEG_INSTANTIATE_TENSOR(T)                                                                              \
  template class BasicTensor<T>;                                                                                 \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,                  \
                                 const BasicTensor<T>&);                                                         \
  template void conv2d_backward(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,                   \
                                const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*, BasicTensor<T>*);       \
  template BasicTensor<T> transposed_conv2d(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,       \
                                            const BasicTensor<T>&);                                              \
  template void transposed_conv2d_backward(const BasicTensor<T>&, const ConvSpec&, const BasicTensor<T>&,        \
                                           const BasicTensor<T>&, BasicTensor<T>*, BasicTensor<T>*,              \
                                           BasicTensor<T>*);                                                     \
  template BasicTensor<T> softmax_channels(const BasicTensor<T>&);                                               \
  template BasicTensor<T> softmax_channels_backward(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                         \
  template BasicTensor<T> slice_channels(const BasicTensor<T>&, std::size_t, std::size_t);                       \
  template BasicTensor<T> activation(const BasicTensor<T>&, Activation);                                         \
  template BasicTensor<T> activation_backward(const BasicTensor<T>&, const BasicTensor<T>&, Activation);         \
  template PoolResult<T> max_pool2x2(const BasicTensor<T>&);                                                     \
  template BasicTensor<T> max_pool2x2_backward(const Shape&, const std::vector<std::size_t>&,                    \
                                               const BasicTensor<T>&);                                           \
  template double dot(const BasicTensor<T>&, const BasicTensor<T>&);                                             \
  template bool all_finite(std::span<const T>);                                                                  \
  template void axpy(T, const BasicTensor<T>&, BasicTensor<T>&);

RESEG_INSTANTIATE_TENSOR(float)
RESEG_INSTANTIATE_TENSOR(double)

#undef RESEG_INSTANTIATE_TENSOR

}  // namespace reseg
