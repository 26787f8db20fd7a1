#pragma once

// Compute kernels for the desk-scale CNN. Every kernel has an OpenMP
// implementation (namespace kernels) and a plain serial one
// (namespace kernels::reference) that tests and benchmarks compare against.
//
// Layouts: activations are (C, H, W); conv weights are (Cout, Cin, K, K).

#include <cstddef>
#include <span>

#include "spurious/tensor.hpp"

namespace spurious::kernels {

struct ConvGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  std::size_t out_size(std::size_t in) const {
    return (in + 2 * padding - kernel) / stride + 1;
  }
};

/// output = conv(input, weight) + bias. Output shape (Cout, Hout, Wout).
Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                      std::span<const float> bias, const ConvGeometry& g);

/// Gradient with respect to the conv input.
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const ConvGeometry& g, std::size_t in_height,
                             std::size_t in_width);

/// Accumulates weight and bias gradients into grad_weight / grad_bias.
void conv2d_backward_params(const Tensor& grad_out, const Tensor& input,
                            const ConvGeometry& g, Tensor& grad_weight,
                            std::span<float> grad_bias);

void relu_inplace(Tensor& t);
/// grad *= (activation > 0).
void relu_backward_inplace(Tensor& grad, const Tensor& activation);

/// Mean over the spatial axes of a (C, H, W) tensor; returns length C.
std::vector<float> global_avg_pool(const Tensor& maps);

/// y = W x + b with W (rows x cols) row-major.
std::vector<float> linear_forward(std::span<const float> weight,
                                  std::span<const float> bias,
                                  std::span<const float> x, std::size_t rows);

/// Bilinear resize of one (H, W) plane, half-pixel centers (align_corners
/// false), edge-clamped.
std::vector<float> bilinear_resize(std::span<const float> plane,
                                   std::size_t height, std::size_t width,
                                   std::size_t out_height,
                                   std::size_t out_width);

namespace reference {

Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                      std::span<const float> bias, const ConvGeometry& g);
Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const ConvGeometry& g, std::size_t in_height,
                             std::size_t in_width);
void conv2d_backward_params(const Tensor& grad_out, const Tensor& input,
                            const ConvGeometry& g, Tensor& grad_weight,
                            std::span<float> grad_bias);
std::vector<float> global_avg_pool(const Tensor& maps);
std::vector<float> bilinear_resize(std::span<const float> plane,
                                   std::size_t height, std::size_t width,
                                   std::size_t out_height,
                                   std::size_t out_width);

}  // namespace reference
}  // namespace spurious::kernels
