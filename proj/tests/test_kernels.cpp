#include <gtest/gtest.h>

#include <random>

#include "spurious/kernels.hpp"
#include "test_support.hpp"

namespace spurious {
namespace {

using testing::random_tensor;

void expect_close(std::span<const float> a, std::span<const float> b, float tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i], b[i], tol * std::max(1.0f, std::abs(b[i]))) << "index " << i;
  }
}

struct ConvCase {
  std::size_t cin, cout, k, stride, pad, h, w;
};

class ConvKernels : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvKernels, ParallelMatchesReference) {
  const ConvCase c = GetParam();
  std::mt19937_64 rng(c.cin * 131 + c.cout * 17 + c.stride);
  const kernels::ConvGeometry g{c.cin, c.cout, c.k, c.stride, c.pad};
  const Tensor input = random_tensor({c.cin, c.h, c.w}, rng, -1, 1);
  const Tensor weight = random_tensor({c.cout, c.cin, c.k, c.k}, rng, -1, 1);
  const Tensor bias_t = random_tensor({c.cout}, rng, -1, 1);
  const auto bias = bias_t.values();

  const Tensor out = kernels::conv2d_forward(input, weight, bias, g);
  const Tensor ref = kernels::reference::conv2d_forward(input, weight, bias, g);
  ASSERT_EQ(out.shape(), ref.shape());
  expect_close(out.values(), ref.values(), 1e-5f);

  const Tensor grad_out = random_tensor(out.shape(), rng, -1, 1);
  expect_close(kernels::conv2d_backward_input(grad_out, weight, g, c.h, c.w).values(),
               kernels::reference::conv2d_backward_input(grad_out, weight, g, c.h, c.w).values(), 1e-5f);

  Tensor gw(weight.shape()), gw_ref(weight.shape());
  std::vector<float> gb(c.cout, 0.5f), gb_ref(c.cout, 0.5f);
  gw.fill(0.25f);
  gw_ref.fill(0.25f);
  kernels::conv2d_backward_params(grad_out, input, g, gw, gb);
  kernels::reference::conv2d_backward_params(grad_out, input, g, gw_ref, gb_ref);
  expect_close(gw.values(), gw_ref.values(), 1e-5f);
  expect_close(gb, gb_ref, 1e-5f);
}

INSTANTIATE_TEST_SUITE_P(Geometries, ConvKernels,
                         ::testing::Values(ConvCase{1, 1, 3, 1, 1, 5, 5}, ConvCase{3, 8, 3, 1, 1, 9, 7},
                                           ConvCase{4, 6, 3, 2, 1, 10, 10}, ConvCase{2, 3, 1, 1, 0, 4, 6},
                                           ConvCase{5, 4, 5, 2, 2, 11, 8}, ConvCase{3, 2, 3, 2, 0, 9, 9}),
                         [](const ::testing::TestParamInfo<ConvCase>& info) {
                           const ConvCase& c = info.param;
                           return "c" + std::to_string(c.cin) + "o" + std::to_string(c.cout) + "k" +
                                  std::to_string(c.k) + "s" + std::to_string(c.stride) + "p" +
                                  std::to_string(c.pad) + "_" + std::to_string(c.h) + "x" + std::to_string(c.w);
                         });

TEST(ConvKernels, HandComputedThreeByThree) {
  // One channel, all-ones 3x3 kernel with zero padding: each output is the
  // sum of its 3x3 neighbourhood.
  const Tensor input({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor weight({1, 1, 3, 3}, 1.0f);
  const std::vector<float> bias{0.5f};
  const Tensor out = kernels::conv2d_forward(input, weight, bias, {1, 1, 3, 1, 1});
  const std::vector<float> expected{12.5f, 21.5f, 16.5f, 27.5f, 45.5f, 33.5f, 24.5f, 39.5f, 28.5f};
  EXPECT_EQ(out.storage(), expected);
}

TEST(ConvKernels, BackwardInputIsAdjointOfForward) {
  // <conv(x), y> = <x, conv^T(y)> for the bias-free convolution.
  std::mt19937_64 rng(5);
  const kernels::ConvGeometry g{3, 4, 3, 2, 1};
  const Tensor x = random_tensor({3, 8, 8}, rng, -1, 1);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng, -1, 1);
  const std::vector<float> zero(4, 0.0f);
  const Tensor fx = kernels::conv2d_forward(x, w, zero, g);
  const Tensor y = random_tensor(fx.shape(), rng, -1, 1);
  const Tensor ty = kernels::conv2d_backward_input(y, w, g, 8, 8);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < fx.size(); ++i) lhs += static_cast<double>(fx[i]) * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += static_cast<double>(x[i]) * ty[i];
  EXPECT_NEAR(lhs, rhs, 1e-4 * std::max(1.0, std::abs(lhs)));
}

TEST(Pooling, ParallelMatchesReferenceAndMean) {
  std::mt19937_64 rng(9);
  const Tensor maps = random_tensor({7, 5, 6}, rng, -2, 2);
  const auto pooled = kernels::global_avg_pool(maps);
  const auto ref = kernels::reference::global_avg_pool(maps);
  expect_close(pooled, ref, 1e-6f);
  for (std::size_t c = 0; c < 7; ++c) {
    double sum = 0;
    for (std::size_t y = 0; y < 5; ++y) {
      for (std::size_t x = 0; x < 6; ++x) sum += maps.at(c, y, x);
    }
    EXPECT_NEAR(pooled[c], sum / 30.0, 1e-6);
  }
}

TEST(Bilinear, ParallelMatchesReference) {
  std::mt19937_64 rng(4);
  for (auto [h, w, oh, ow] : std::vector<std::array<std::size_t, 4>>{{8, 8, 32, 32}, {3, 5, 7, 2}, {1, 1, 4, 4}, {6, 4, 6, 4}}) {
    const Tensor plane = random_tensor({h, w}, rng);
    expect_close(kernels::bilinear_resize(plane.values(), h, w, oh, ow),
                 kernels::reference::bilinear_resize(plane.values(), h, w, oh, ow), 1e-6f);
  }
}

TEST(Bilinear, HalfPixelUpsampleOfTwoSamples) {
  const std::vector<float> row{1.0f, 5.0f};
  const auto out = kernels::bilinear_resize(row, 1, 2, 1, 4);
  // Source coordinates -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
  const std::vector<float> expected{1.0f, 2.0f, 4.0f, 5.0f};
  ASSERT_EQ(out.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(out[i], expected[i]);
}

TEST(Bilinear, SameSizeIsIdentity) {
  std::mt19937_64 rng(2);
  const Tensor plane = random_tensor({5, 7}, rng);
  EXPECT_EQ(kernels::bilinear_resize(plane.values(), 5, 7, 5, 7), plane.storage());
}

TEST(Relu, ForwardAndBackward) {
  Tensor t({1, 1, 4}, {-1.0f, 0.0f, 2.0f, -3.0f});
  kernels::relu_inplace(t);
  EXPECT_EQ(t.storage(), (std::vector<float>{0.0f, 0.0f, 2.0f, 0.0f}));
  Tensor g({1, 1, 4}, {1.0f, 1.0f, 1.0f, 1.0f});
  kernels::relu_backward_inplace(g, t);
  EXPECT_EQ(g.storage(), (std::vector<float>{0.0f, 0.0f, 1.0f, 0.0f}));
}

TEST(Linear, MatrixVector) {
  const std::vector<float> w{1, 2, 3, 4, 5, 6};
  const std::vector<float> b{0.5f, -1.0f};
  const std::vector<float> x{1, 0, -1};
  EXPECT_EQ(kernels::linear_forward(w, b, x, 2), (std::vector<float>{-1.5f, -3.0f}));
}

}  // namespace
}  // namespace spurious
