// SPDX-License-Identifier: Apache-2.0
/**
 * @file   tensor.hpp
 * @brief  Dense n-dimensional array and the numeric primitives built on it.
 *
 * Feature maps are rank-3 tensors laid out row-major as rows x cols x
 * channels, so the channel vector of one pixel is contiguous. Convolution
 * kernels are rank-4, kernel_h x kernel_w x in_channels x out_channels.
 *
 * Convolutions are cross-correlations (no kernel flip). transposed_conv2d is
 * the exact adjoint of conv2d for the same ConvSpec and kernels: it consumes
 * a map with spec.out_channels channels and produces one with
 * spec.in_channels channels.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "reseg/errors.hpp"

namespace reseg {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  /// Scalar zero of shape {1}.
  BasicTensor();
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t extent(std::size_t axis) const;

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  T& operator()(std::size_t r, std::size_t c, std::size_t ch) {
    return data_[(r * shape_[1] + c) * shape_[2] + ch];
  }
  const T& operator()(std::size_t r, std::size_t c, std::size_t ch) const {
    return data_[(r * shape_[1] + c) * shape_[2] + ch];
  }

  // Feature-map accessors; only meaningful for rank-3 tensors.
  std::size_t rows() const { return extent(0); }
  std::size_t cols() const { return extent(1); }
  std::size_t channels() const { return extent(2); }

  BasicTensor reshaped(Shape shape) const;
  void fill(T value);

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return BasicTensor<U>(shape_, std::move(out));
  }

  bool operator==(const BasicTensor& other) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Per-side zero padding of a convolution input.
struct Padding {
  std::size_t top = 0;
  std::size_t bottom = 0;
  std::size_t left = 0;
  std::size_t right = 0;

  static Padding uniform(std::size_t p) { return {p, p, p, p}; }
  bool is_zero() const { return top == 0 && bottom == 0 && left == 0 && right == 0; }
  bool operator==(const Padding&) const = default;
};

struct ConvSpec {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  Padding padding;

  /// Stride equal to kernel size, no padding: the upsampling form.
  static ConvSpec tied(std::size_t kh, std::size_t kw, std::size_t in_ch, std::size_t out_ch) {
    return {kh, kw, in_ch, out_ch, kh, kw, {}};
  }

  bool is_tied() const { return stride_h == kernel_h && stride_w == kernel_w && padding.is_zero(); }
  Shape kernel_shape() const { return {kernel_h, kernel_w, in_channels, out_channels}; }
  /// Throws ConfigError on zero extents.
  void validate() const;
  bool operator==(const ConvSpec&) const = default;
};

/// Spatial extent after a convolution; throws DimensionError if it would be < 1.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad_lo, std::size_t pad_hi, const char* axis);

enum class Activation { relu, tanh, sigmoid };

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvSpec& spec, const BasicTensor<T>& kernels,
                      const BasicTensor<T>& bias);

/// Gradients of conv2d. Any output pointer may be null.
template <typename T>
void conv2d_backward(const BasicTensor<T>& input, const ConvSpec& spec, const BasicTensor<T>& kernels,
                     const BasicTensor<T>& grad_output, BasicTensor<T>* grad_input,
                     BasicTensor<T>* grad_kernels, BasicTensor<T>* grad_bias);

/// Adjoint of conv2d plus bias (length spec.in_channels). Requires a tied spec.
template <typename T>
BasicTensor<T> transposed_conv2d(const BasicTensor<T>& input, const ConvSpec& spec,
                                 const BasicTensor<T>& kernels, const BasicTensor<T>& bias);

template <typename T>
void transposed_conv2d_backward(const BasicTensor<T>& input, const ConvSpec& spec,
                                const BasicTensor<T>& kernels, const BasicTensor<T>& grad_output,
                                BasicTensor<T>* grad_input, BasicTensor<T>* grad_kernels,
                                BasicTensor<T>* grad_bias);

/// Per-pixel softmax over the channel axis, max-subtracted.
template <typename T>
BasicTensor<T> softmax_channels(const BasicTensor<T>& logits);

/// Vector-Jacobian product of softmax_channels given its output.
template <typename T>
BasicTensor<T> softmax_channels_backward(const BasicTensor<T>& probs, const BasicTensor<T>& grad_probs);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t begin, std::size_t count);

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& x, Activation kind);

/// d(loss)/d(x) from the activation output; relu uses subgradient 0 at 0.
template <typename T>
BasicTensor<T> activation_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_output,
                                   Activation kind);

template <typename T>
struct PoolResult {
  BasicTensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2 max pooling with stride 2; extents must be even.
template <typename T>
PoolResult<T> max_pool2x2(const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> max_pool2x2_backward(const Shape& input_shape, const std::vector<std::size_t>& argmax,
                                    const BasicTensor<T>& grad_output);

/// Inner product accumulated in double.
template <typename T>
double dot(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
bool all_finite(std::span<const T> values);

template <typename T>
bool all_finite(const BasicTensor<T>& x) {
  return all_finite<T>(x.values());
}

/// a += scale * b, same shapes required.
template <typename T>
void axpy(T scale, const BasicTensor<T>& b, BasicTensor<T>& a);

}  // namespace reseg
