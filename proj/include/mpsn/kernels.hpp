#pragma once

// Convolution and pooling kernels over single (batch-1) CHW tensors.
//
// Two implementations share each signature:
//   mpsn::kernels::            OpenMP-parallel, im2col + GEMM (used everywhere)
//   mpsn::kernels::reference:: serial direct loops, kept for tests and benchmarks
//
// Backward kernels accumulate into their outputs; callers zero them first.

#include <cstddef>
#include <span>

namespace mpsn::kernels {

struct ConvShape {
  std::size_t in_channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t groups = 1;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::size_t in_per_group() const { return in_channels / groups; }
  std::size_t out_per_group() const { return out_channels / groups; }
  std::size_t weight_size() const { return out_channels * in_per_group() * kernel * kernel; }
  std::size_t input_size() const { return in_channels * in_h * in_w; }
  std::size_t output_size() const { return out_channels * out_h() * out_w(); }
  bool depthwise() const { return groups > 1 && groups == in_channels && groups == out_channels; }
};

struct PoolShape {
  std::size_t channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t kernel = 2;
  std::size_t stride = 2;
  std::size_t pad = 0;

  std::size_t out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  std::size_t output_size() const { return channels * out_h() * out_w(); }
};

/// Throws ContractError when groups do not divide the channel counts or the
/// kernel does not fit the padded input.
void validate(const ConvShape& shape);

void conv2d_forward(const ConvShape& shape, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output);
void conv2d_backward_input(const ConvShape& shape, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input);
void conv2d_backward_params(const ConvShape& shape, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias);

/// `argmax` receives the flat input index chosen for each output cell.
void maxpool_forward(const PoolShape& shape, std::span<const double> input,
                     std::span<double> output, std::span<std::size_t> argmax);
void maxpool_backward(const PoolShape& shape, std::span<const double> grad_output,
                      std::span<const std::size_t> argmax, std::span<double> grad_input);

namespace reference {

void conv2d_forward(const ConvShape& shape, std::span<const double> input,
                    std::span<const double> weight, std::span<const double> bias,
                    std::span<double> output);
void conv2d_backward_input(const ConvShape& shape, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input);
void conv2d_backward_params(const ConvShape& shape, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias);
void maxpool_forward(const PoolShape& shape, std::span<const double> input,
                     std::span<double> output, std::span<std::size_t> argmax);
void maxpool_backward(const PoolShape& shape, std::span<const double> grad_output,
                      std::span<const std::size_t> argmax, std::span<double> grad_input);

}  // namespace reference

}  // namespace mpsn::kernels
