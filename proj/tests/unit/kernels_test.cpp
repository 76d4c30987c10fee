#include "r2r/kernels.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace r2r::kernels {
namespace {

using r2r::testing::random_tensor;

// Direct six-loop convolution with zero padding.
Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor y({n, co, oh, ow});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x.at(b, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * w.at(o, c, ky, kx);
              }
          y.at(b, o, oy, ox) = static_cast<float>(acc);
        }
  return y;
}

TEST(Kernels, ConvMatchesDirectLoops) {
  for (std::size_t pad : {0u, 1u})
    for (std::size_t stride : {1u, 2u}) {
      const Tensor x = random_tensor({2, 3, 9, 7}, 1 + pad + stride);
      const Tensor w = random_tensor({4, 3, 3, 3}, 9);
      EXPECT_LE(max_abs_diff(conv2d(x, w, {stride, pad}), naive_conv(x, w, stride, pad)), 1e-5f)
          << "pad " << pad << " stride " << stride;
    }
}

TEST(Kernels, MaxPoolPicksWindowMaximum) {
  const Tensor x = random_tensor({2, 3, 6, 6}, 4);
  Shape out;
  const auto idx = maxpool_indices(x, 2, 2, &out);
  ASSERT_EQ(out, (Shape{2, 3, 3, 3}));
  const Tensor y = gather(x, idx, out);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t oy = 0; oy < 3; ++oy)
        for (std::size_t ox = 0; ox < 3; ++ox) {
          float m = -1e9f;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) m = std::max(m, x.at(b, c, 2 * oy + dy, 2 * ox + dx));
          EXPECT_EQ(y.at(b, c, oy, ox), m);
        }
}

TEST(Kernels, AvgPoolAndMatmul) {
  const Tensor x = Tensor::from({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  EXPECT_EQ(avgpool(x, 2, 2), Tensor::from({1, 1, 1, 2}, {3.5f, 5.5f}));
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b = Tensor::from({2, 3}, {1, 0, 1, 0, 1, 0});
  EXPECT_EQ(matmul(a, b, false, true), Tensor::from({2, 2}, {4, 2, 10, 5}));
  EXPECT_EQ(matmul(a, b, true, false), Tensor::from({3, 3}, {1, 4, 1, 2, 5, 2, 3, 6, 3}));
}

}  // namespace
}  // namespace r2r::kernels
