#include "spurious/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace spurious::kernels {

namespace {

void check_conv_input(const Tensor& input, const Tensor& weight,
                      const ConvGeometry& g) {
  if (input.rank() != 3 || input.dim(0) != g.in_channels) {
    throw InvalidInput("conv2d: input " + shape_string(input.shape()) +
                       " does not have " + std::to_string(g.in_channels) +
                       " channels");
  }
  if (weight.size() != g.out_channels * g.in_channels * g.kernel * g.kernel) {
    throw InvalidInput("conv2d: weight " + shape_string(weight.shape()) +
                       " does not match geometry");
  }
  if (input.dim(1) + 2 * g.padding < g.kernel ||
      input.dim(2) + 2 * g.padding < g.kernel) {
    throw InvalidInput("conv2d: input smaller than kernel");
  }
}

// col has shape (Cin*K*K, Hout*Wout).
std::vector<float> im2col(const Tensor& input, const ConvGeometry& g,
                          std::size_t out_h, std::size_t out_w) {
  const std::size_t height = input.dim(1);
  const std::size_t width = input.dim(2);
  const std::size_t k = g.kernel;
  const std::size_t cols = out_h * out_w;
  std::vector<float> col(g.in_channels * k * k * cols, 0.0f);
  const auto rows = static_cast<long>(g.in_channels * k * k);

#pragma omp parallel for schedule(static)
  for (long r = 0; r < rows; ++r) {
    const std::size_t ci = static_cast<std::size_t>(r) / (k * k);
    const std::size_t ky = (static_cast<std::size_t>(r) / k) % k;
    const std::size_t kx = static_cast<std::size_t>(r) % k;
    float* dst = col.data() + static_cast<std::size_t>(r) * cols;
    const float* src = input.data() + ci * height * width;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const long iy = static_cast<long>(oy * g.stride + ky) -
                      static_cast<long>(g.padding);
      if (iy < 0 || iy >= static_cast<long>(height)) continue;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const long ix = static_cast<long>(ox * g.stride + kx) -
                        static_cast<long>(g.padding);
        if (ix < 0 || ix >= static_cast<long>(width)) continue;
        dst[oy * out_w + ox] = src[static_cast<std::size_t>(iy) * width +
                                   static_cast<std::size_t>(ix)];
      }
    }
  }
  return col;
}

}  // namespace

Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                      std::span<const float> bias, const ConvGeometry& g) {
  check_conv_input(input, weight, g);
  const std::size_t out_h = g.out_size(input.dim(1));
  const std::size_t out_w = g.out_size(input.dim(2));
  const std::size_t cols = out_h * out_w;
  const std::size_t rows = g.in_channels * g.kernel * g.kernel;
  const std::vector<float> col = im2col(input, g, out_h, out_w);

  Tensor output({g.out_channels, out_h, out_w});
  const auto out_channels = static_cast<long>(g.out_channels);
#pragma omp parallel for schedule(static)
  for (long co = 0; co < out_channels; ++co) {
    float* dst = output.data() + static_cast<std::size_t>(co) * cols;
    const float b = bias.empty() ? 0.0f : bias[static_cast<std::size_t>(co)];
    std::fill(dst, dst + cols, b);
    const float* w = weight.data() + static_cast<std::size_t>(co) * rows;
    for (std::size_t r = 0; r < rows; ++r) {
      const float wr = w[r];
      const float* src = col.data() + r * cols;
#pragma omp simd
      for (std::size_t p = 0; p < cols; ++p) dst[p] += wr * src[p];
    }
  }
  return output;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const ConvGeometry& g, std::size_t in_height,
                             std::size_t in_width) {
  const std::size_t out_h = grad_out.dim(1);
  const std::size_t out_w = grad_out.dim(2);
  const std::size_t cols = out_h * out_w;
  const std::size_t k = g.kernel;
  const std::size_t rows = g.in_channels * k * k;

  std::vector<float> grad_col(rows * cols, 0.0f);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < static_cast<long>(rows); ++r) {
    float* dst = grad_col.data() + static_cast<std::size_t>(r) * cols;
    for (std::size_t co = 0; co < g.out_channels; ++co) {
      const float wr = weight[co * rows + static_cast<std::size_t>(r)];
      const float* src = grad_out.data() + co * cols;
#pragma omp simd
      for (std::size_t p = 0; p < cols; ++p) dst[p] += wr * src[p];
    }
  }

  // col2im: each input channel owns a disjoint block of rows.
  Tensor grad_in({g.in_channels, in_height, in_width});
#pragma omp parallel for schedule(static)
  for (long ci = 0; ci < static_cast<long>(g.in_channels); ++ci) {
    float* plane = grad_in.data() + static_cast<std::size_t>(ci) * in_height * in_width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const float* src =
            grad_col.data() + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * cols;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) -
                          static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(in_height)) continue;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) -
                            static_cast<long>(g.padding);
            if (ix < 0 || ix >= static_cast<long>(in_width)) continue;
            plane[static_cast<std::size_t>(iy) * in_width +
                  static_cast<std::size_t>(ix)] += src[oy * out_w + ox];
          }
        }
      }
    }
  }
  return grad_in;
}

void conv2d_backward_params(const Tensor& grad_out, const Tensor& input,
                            const ConvGeometry& g, Tensor& grad_weight,
                            std::span<float> grad_bias) {
  const std::size_t out_h = grad_out.dim(1);
  const std::size_t out_w = grad_out.dim(2);
  const std::size_t cols = out_h * out_w;
  const std::size_t rows = g.in_channels * g.kernel * g.kernel;
  const std::vector<float> col = im2col(input, g, out_h, out_w);

#pragma omp parallel for schedule(static)
  for (long co = 0; co < static_cast<long>(g.out_channels); ++co) {
    const float* go = grad_out.data() + static_cast<std::size_t>(co) * cols;
    float* gw = grad_weight.data() + static_cast<std::size_t>(co) * rows;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* src = col.data() + r * cols;
      float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
      for (std::size_t p = 0; p < cols; ++p) acc += go[p] * src[p];
      gw[r] += acc;
    }
    if (!grad_bias.empty()) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < cols; ++p) acc += go[p];
      grad_bias[static_cast<std::size_t>(co)] += acc;
    }
  }
}

void relu_inplace(Tensor& t) {
  float* d = t.data();
  const auto n = static_cast<long>(t.size());
#pragma omp parallel for simd schedule(static)
  for (long i = 0; i < n; ++i) d[i] = d[i] > 0.0f ? d[i] : 0.0f;
}

void relu_backward_inplace(Tensor& grad, const Tensor& activation) {
  float* g = grad.data();
  const float* a = activation.data();
  const auto n = static_cast<long>(grad.size());
#pragma omp parallel for simd schedule(static)
  for (long i = 0; i < n; ++i) g[i] = a[i] > 0.0f ? g[i] : 0.0f;
}

std::vector<float> global_avg_pool(const Tensor& maps) {
  const std::size_t channels = maps.dim(0);
  const std::size_t plane = maps.dim(1) * maps.dim(2);
  std::vector<float> pooled(channels);
#pragma omp parallel for schedule(static)
  for (long c = 0; c < static_cast<long>(channels); ++c) {
    const float* src = maps.data() + static_cast<std::size_t>(c) * plane;
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += src[p];
    pooled[static_cast<std::size_t>(c)] = static_cast<float>(acc / static_cast<double>(plane));
  }
  return pooled;
}

std::vector<float> linear_forward(std::span<const float> weight,
                                  std::span<const float> bias,
                                  std::span<const float> x, std::size_t rows) {
  const std::size_t cols = x.size();
  std::vector<float> y(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double acc = bias.empty() ? 0.0 : bias[i];
    for (std::size_t j = 0; j < cols; ++j) acc += static_cast<double>(weight[i * cols + j]) * x[j];
    y[i] = static_cast<float>(acc);
  }
  return y;
}

namespace {
struct Tap {
  std::size_t lo, hi;
  float frac;
};

Tap source_tap(std::size_t dst, std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const auto lo = static_cast<std::size_t>(std::floor(src));
  const std::size_t hi = std::min(lo + 1, in - 1);
  return {lo, hi, static_cast<float>(src - static_cast<double>(lo))};
}
}  // namespace

std::vector<float> bilinear_resize(std::span<const float> plane,
                                   std::size_t height, std::size_t width,
                                   std::size_t out_height,
                                   std::size_t out_width) {
  if (plane.size() != height * width || height == 0 || width == 0) {
    throw InvalidInput("bilinear_resize: plane does not match shape");
  }
  std::vector<Tap> xs(out_width);
  for (std::size_t x = 0; x < out_width; ++x) xs[x] = source_tap(x, width, out_width);
  std::vector<float> out(out_height * out_width);
#pragma omp parallel for schedule(static)
  for (long y = 0; y < static_cast<long>(out_height); ++y) {
    const Tap ty = source_tap(static_cast<std::size_t>(y), height, out_height);
    for (std::size_t x = 0; x < out_width; ++x) {
      const Tap& tx = xs[x];
      const float top = plane[ty.lo * width + tx.lo] * (1.0f - tx.frac) +
                        plane[ty.lo * width + tx.hi] * tx.frac;
      const float bottom = plane[ty.hi * width + tx.lo] * (1.0f - tx.frac) +
                           plane[ty.hi * width + tx.hi] * tx.frac;
      out[static_cast<std::size_t>(y) * out_width + x] =
          top * (1.0f - ty.frac) + bottom * ty.frac;
    }
  }
  return out;
}

namespace reference {

Tensor conv2d_forward(const Tensor& input, const Tensor& weight,
                      std::span<const float> bias, const ConvGeometry& g) {
  check_conv_input(input, weight, g);
  const std::size_t height = input.dim(1), width = input.dim(2);
  const std::size_t out_h = g.out_size(height), out_w = g.out_size(width);
  const std::size_t k = g.kernel;
  Tensor output({g.out_channels, out_h, out_w});
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        double acc = bias.empty() ? 0.0 : bias[co];
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(height) ||
                  ix >= static_cast<long>(width)) {
                continue;
              }
              acc += static_cast<double>(weight[((co * g.in_channels + ci) * k + ky) * k + kx]) *
                     input.at(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
        output.at(co, oy, ox) = static_cast<float>(acc);
      }
    }
  }
  return output;
}

Tensor conv2d_backward_input(const Tensor& grad_out, const Tensor& weight,
                             const ConvGeometry& g, std::size_t in_height,
                             std::size_t in_width) {
  const std::size_t k = g.kernel;
  Tensor grad_in({g.in_channels, in_height, in_width});
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t oy = 0; oy < grad_out.dim(1); ++oy) {
      for (std::size_t ox = 0; ox < grad_out.dim(2); ++ox) {
        const float go = grad_out.at(co, oy, ox);
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(in_height) ||
                  ix >= static_cast<long>(in_width)) {
                continue;
              }
              grad_in.at(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                  go * weight[((co * g.in_channels + ci) * k + ky) * k + kx];
            }
          }
        }
      }
    }
  }
  return grad_in;
}

void conv2d_backward_params(const Tensor& grad_out, const Tensor& input,
                            const ConvGeometry& g, Tensor& grad_weight,
                            std::span<float> grad_bias) {
  const std::size_t k = g.kernel;
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    for (std::size_t oy = 0; oy < grad_out.dim(1); ++oy) {
      for (std::size_t ox = 0; ox < grad_out.dim(2); ++ox) {
        const float go = grad_out.at(co, oy, ox);
        if (!grad_bias.empty()) grad_bias[co] += go;
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
          for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(input.dim(1)) ||
                  ix >= static_cast<long>(input.dim(2))) {
                continue;
              }
              grad_weight[((co * g.in_channels + ci) * k + ky) * k + kx] +=
                  go * input.at(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
      }
    }
  }
}

std::vector<float> global_avg_pool(const Tensor& maps) {
  std::vector<float> pooled(maps.dim(0));
  const std::size_t plane = maps.dim(1) * maps.dim(2);
  for (std::size_t c = 0; c < maps.dim(0); ++c) {
    double acc = 0.0;
    for (float v : maps.slice(c)) acc += v;
    pooled[c] = static_cast<float>(acc / static_cast<double>(plane));
  }
  return pooled;
}

std::vector<float> bilinear_resize(std::span<const float> plane,
                                   std::size_t height, std::size_t width,
                                   std::size_t out_height,
                                   std::size_t out_width) {
  std::vector<float> out(out_height * out_width);
  for (std::size_t y = 0; y < out_height; ++y) {
    const Tap ty = source_tap(y, height, out_height);
    for (std::size_t x = 0; x < out_width; ++x) {
      const Tap tx = source_tap(x, width, out_width);
      const float top = plane[ty.lo * width + tx.lo] * (1.0f - tx.frac) +
                        plane[ty.lo * width + tx.hi] * tx.frac;
      const float bottom = plane[ty.hi * width + tx.lo] * (1.0f - tx.frac) +
                           plane[ty.hi * width + tx.hi] * tx.frac;
      out[y * out_width + x] = top * (1.0f - ty.frac) + bottom * ty.frac;
    }
  }
  return out;
}

}  // namespace reference
}  // namespace spurious::kernels
