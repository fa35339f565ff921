#pragma once

// Differentiable building blocks with hand-written backward passes.
// Backward functions ACCUMULATE into parameter gradients and return the
// gradient w.r.t. the layer input.

#include <span>

#include "cbswr/tensor.hpp"

namespace cbswr::layers {

/// y = x W^T + b; x (n, in), W (out, in), b (out) or empty.
Tensor linear(const Tensor& x, std::span<const double> weight, std::span<const double> bias, std::size_t out_features);
Tensor linear_backward(const Tensor& x, const Tensor& dy, std::span<const double> weight, std::span<double> d_weight,
                       std::span<double> d_bias);

struct ConvGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

std::size_t conv_output_extent(std::size_t in, const ConvGeometry& g);
std::size_t conv_transpose_output_extent(std::size_t in, const ConvGeometry& g);

/// x (n, c_in, h, w), weight (c_out, c_in, k, k), bias (c_out).
Tensor conv2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias, std::size_t out_channels,
              const ConvGeometry& g);
Tensor conv2d_backward(const Tensor& x, const Tensor& dy, std::span<const double> weight, std::span<double> d_weight,
                       std::span<double> d_bias, const ConvGeometry& g);

/// Transposed convolution; x (n, c_in, h, w), weight (c_in, c_out, k, k), bias (c_out).
Tensor conv_transpose2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
                        std::size_t out_channels, const ConvGeometry& g);
Tensor conv_transpose2d_backward(const Tensor& x, const Tensor& dy, std::span<const double> weight,
                                 std::span<double> d_weight, std::span<double> d_bias, const ConvGeometry& g);

/// ELU with alpha = 1 (C1-smooth at the origin).
Tensor elu(const Tensor& x);
Tensor elu_backward(const Tensor& x, const Tensor& dy);

Tensor sigmoid(const Tensor& x);
/// Takes the sigmoid OUTPUT `y`.
Tensor sigmoid_backward(const Tensor& y, const Tensor& dy);

/// Row-wise L2 normalization. Throws DegenerateEmbeddingError when a row norm < 1e-12.
/// `norms` receives the pre-normalization row norms.
Tensor l2_normalize_rows(const Tensor& x, std::vector<double>* norms = nullptr);
/// `y` is the normalized output, `norms` the matching pre-normalization norms.
Tensor l2_normalize_rows_backward(const Tensor& y, const std::vector<double>& norms, const Tensor& dy);

/// Row-wise softmax and log-softmax.
Tensor softmax_rows(const Tensor& logits);
Tensor log_softmax_rows(const Tensor& logits);

inline constexpr double kMinEmbeddingNorm = 1e-12;

}  // namespace cbswr::layers
