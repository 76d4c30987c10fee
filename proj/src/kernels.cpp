#include "r2r/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace r2r::kernels {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_rank(const Tensor& t, std::size_t r, const char* what) {
  if (t.rank() != r) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
  }
}

struct ConvDims {
  std::size_t n, ci, h, w, co, k, ho, wo;
};

ConvDims conv_dims(const Shape& x, const Shape& w, ConvGeometry g) {
  if (x.size() != 4 || w.size() != 4) throw ShapeError("conv2d: rank-4 tensors required");
  if (x[1] != w[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(x[1]) + " vs weight " +
                     shape_str(w));
  }
  if (w[2] != w[3]) throw ShapeError("conv2d: square kernels only");
  ConvDims d{x[0], x[1], x[2], x[3], w[0], w[2], 0, 0};
  d.ho = conv_out_size(d.h, d.k, g.stride, g.pad);
  d.wo = conv_out_size(d.w, d.k, g.stride, g.pad);
  return d;
}

// col is (ci*k*k) x (ho*wo), row-major.
void im2col(const float* x, const ConvDims& d, ConvGeometry g, float* col) {
  const std::size_t plane = d.ho * d.wo;
  for (std::size_t c = 0; c < d.ci; ++c) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        float* row = col + ((c * d.k + ky) * d.k + kx) * plane;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            float v = 0.0f;
            if (iy >= 0 && ix >= 0 && iy < static_cast<long>(d.h) && ix < static_cast<long>(d.w)) {
              v = x[(c * d.h + static_cast<std::size_t>(iy)) * d.w + static_cast<std::size_t>(ix)];
            }
            row[oy * d.wo + ox] = v;
          }
        }
      }
    }
  }
}

void col2im(const float* col, const ConvDims& d, ConvGeometry g, float* x) {
  const std::size_t plane = d.ho * d.wo;
  for (std::size_t c = 0; c < d.ci; ++c) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const float* row = col + ((c * d.k + ky) * d.k + kx) * plane;
        for (std::size_t oy = 0; oy < d.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(d.h)) continue;
          for (std::size_t ox = 0; ox < d.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(d.w)) continue;
            x[(c * d.h + static_cast<std::size_t>(iy)) * d.w + static_cast<std::size_t>(ix)] +=
                row[oy * d.wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t pad) {
  if (stride == 0) throw ShapeError("conv: stride must be positive");
  if (in + 2 * pad < kernel) throw ShapeError("conv: kernel larger than padded input");
  return (in + 2 * pad - kernel) / stride + 1;
}

std::size_t pool_out_size(std::size_t in, std::size_t kernel, std::size_t stride) {
  if (stride == 0 || kernel == 0) throw ShapeError("pool: kernel and stride must be positive");
  if (in < kernel) throw ShapeError("pool: kernel larger than input");
  return (in - kernel) / stride + 1;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::size_t ka = trans_a ? a.dim(0) : a.dim(1);
  const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb) {
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out(Shape{m, n});
  CMapMat A(a.data(), static_cast<Eigen::Index>(a.dim(0)), static_cast<Eigen::Index>(a.dim(1)));
  CMapMat B(b.data(), static_cast<Eigen::Index>(b.dim(0)), static_cast<Eigen::Index>(b.dim(1)));
  MapMat C(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  if (!trans_a && !trans_b) C.noalias() = A * B;
  else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
  else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, ConvGeometry g) {
  const ConvDims d = conv_dims(x.shape(), w.shape(), g);
  const std::size_t rows = d.ci * d.k * d.k;
  const std::size_t plane = d.ho * d.wo;
  Tensor out(Shape{d.n, d.co, d.ho, d.wo});
  std::vector<float> col(rows * plane);
  CMapMat W(w.data(), static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(rows));
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.data() + n * d.ci * d.h * d.w, d, g, col.data());
    CMapMat Col(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(plane));
    MapMat O(out.data() + n * d.co * plane, static_cast<Eigen::Index>(d.co),
             static_cast<Eigen::Index>(plane));
    O.noalias() = W * Col;
  }
  return out;
}

Tensor conv2d_input_grad(const Tensor& grad_out, const Tensor& w, ConvGeometry g,
                         const Shape& in_shape) {
  const ConvDims d = conv_dims(in_shape, w.shape(), g);
  if (grad_out.shape() != Shape{d.n, d.co, d.ho, d.wo}) {
    throw ShapeError("conv2d_input_grad: grad shape " + shape_str(grad_out.shape()));
  }
  const std::size_t rows = d.ci * d.k * d.k;
  const std::size_t plane = d.ho * d.wo;
  Tensor out(in_shape);
  std::vector<float> col(rows * plane);
  CMapMat W(w.data(), static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(rows));
  MapMat Col(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(plane));
  for (std::size_t n = 0; n < d.n; ++n) {
    CMapMat G(grad_out.data() + n * d.co * plane, static_cast<Eigen::Index>(d.co),
              static_cast<Eigen::Index>(plane));
    Col.noalias() = W.transpose() * G;
    col2im(col.data(), d, g, out.data() + n * d.ci * d.h * d.w);
  }
  return out;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, ConvGeometry g,
                          const Shape& w_shape) {
  const ConvDims d = conv_dims(x.shape(), w_shape, g);
  if (grad_out.shape() != Shape{d.n, d.co, d.ho, d.wo}) {
    throw ShapeError("conv2d_weight_grad: grad shape " + shape_str(grad_out.shape()));
  }
  const std::size_t rows = d.ci * d.k * d.k;
  const std::size_t plane = d.ho * d.wo;
  std::vector<float> col(rows * plane);
  RowMat part(static_cast<Eigen::Index>(d.co), static_cast<Eigen::Index>(rows));
  // Per-sample partial products stay in float; the batch reduction runs in double.
  std::vector<double> acc(d.co * rows, 0.0);
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.data() + n * d.ci * d.h * d.w, d, g, col.data());
    CMapMat Col(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(plane));
    CMapMat G(grad_out.data() + n * d.co * plane, static_cast<Eigen::Index>(d.co),
              static_cast<Eigen::Index>(plane));
    part.noalias() = G * Col.transpose();
    const float* p = part.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
  }
  Tensor out(w_shape);
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

std::vector<std::uint32_t> maxpool_indices(const Tensor& x, std::size_t kernel,
                                           std::size_t stride, Shape* out_shape) {
  require_rank(x, 4, "maxpool");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = pool_out_size(h, kernel, stride);
  const std::size_t wo = pool_out_size(w, kernel, stride);
  std::vector<std::uint32_t> idx(n * c * ho * wo);
  std::size_t o = 0;
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * h * w;
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          std::size_t best = base + (oy * stride) * w + ox * stride;
          float bv = x[best];
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::size_t i = base + (oy * stride + ky) * w + ox * stride + kx;
              if (x[i] > bv) {
                bv = x[i];
                best = i;
              }
            }
          }
          idx[o++] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  if (out_shape) *out_shape = Shape{n, c, ho, wo};
  return idx;
}

Tensor gather(const Tensor& x, const std::vector<std::uint32_t>& idx, const Shape& out_shape) {
  if (shape_numel(out_shape) != idx.size()) throw ShapeError("gather: index count mismatch");
  Tensor out(out_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = x[idx[i]];
  return out;
}

Tensor scatter_add(const Tensor& g, const std::vector<std::uint32_t>& idx, const Shape& in_shape) {
  if (g.numel() != idx.size()) throw ShapeError("scatter: index count mismatch");
  Tensor out(in_shape);
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] += g[i];
  return out;
}

Tensor avgpool(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank(x, 4, "avgpool");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = pool_out_size(h, kernel, stride);
  const std::size_t wo = pool_out_size(w, kernel, stride);
  const float inv = 1.0f / static_cast<float>(kernel * kernel);
  Tensor out(Shape{n, c, ho, wo});
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        float s = 0.0f;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx)
            s += x[p * h * w + (oy * stride + ky) * w + ox * stride + kx];
        out[(p * ho + oy) * wo + ox] = s * inv;
      }
    }
  }
  return out;
}

Tensor avgpool_transpose(const Tensor& g, std::size_t kernel, std::size_t stride,
                         const Shape& in_shape) {
  require_rank(g, 4, "avgpool_transpose");
  const std::size_t h = in_shape[2], w = in_shape[3];
  const std::size_t ho = g.dim(2), wo = g.dim(3);
  const float inv = 1.0f / static_cast<float>(kernel * kernel);
  Tensor out(in_shape);
  for (std::size_t p = 0; p < in_shape[0] * in_shape[1]; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const float v = g[(p * ho + oy) * wo + ox] * inv;
        for (std::size_t ky = 0; ky < kernel; ++ky)
          for (std::size_t kx = 0; kx < kernel; ++kx)
            out[p * h * w + (oy * stride + ky) * w + ox * stride + kx] += v;
      }
    }
  }
  return out;
}

Tensor channel_broadcast(const Tensor& v, const Shape& shape) {
  if (shape.size() < 2 || v.numel() != shape[1]) {
    throw ShapeError("channel_broadcast: " + shape_str(v.shape()) + " onto " + shape_str(shape));
  }
  Tensor out(shape);
  std::size_t inner = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) inner *= shape[i];
  for (std::size_t n = 0; n < shape[0]; ++n)
    for (std::size_t c = 0; c < shape[1]; ++c)
      std::fill_n(out.data() + (n * shape[1] + c) * inner, inner, v[c]);
  return out;
}

Tensor channel_sum(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("channel_sum: rank >= 2 required");
  std::size_t inner = 1;
  for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.dim(i);
  std::vector<double> acc(x.dim(1), 0.0);
  for (std::size_t n = 0; n < x.dim(0); ++n)
    for (std::size_t c = 0; c < x.dim(1); ++c) {
      const float* p = x.data() + (n * x.dim(1) + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) acc[c] += p[i];
    }
  Tensor out(Shape{x.dim(1)});
  for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c]);
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_rank(x, 2, "softmax");
  Tensor out(x.shape());
  const std::size_t cols = x.dim(1);
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    const float* in = x.data() + r * cols;
    float* o = out.data() + r * cols;
    const float mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      s += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] = static_cast<float>(o[c] / s);
  }
  return out;
}

Tensor log_softmax_rows(const Tensor& x) {
  require_rank(x, 2, "log_softmax");
  Tensor out(x.shape());
  const std::size_t cols = x.dim(1);
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    const float* in = x.data() + r * cols;
    float* o = out.data() + r * cols;
    const float mx = *std::max_element(in, in + cols);
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(static_cast<double>(in[c] - mx));
    const float lse = mx + static_cast<float>(std::log(s));
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  return out;
}

Tensor row_sum_broadcast(const Tensor& x) {
  require_rank(x, 2, "row_sum_broadcast");
  Tensor out(x.shape());
  const std::size_t cols = x.dim(1);
  for (std::size_t r = 0; r < x.dim(0); ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += x[r * cols + c];
    std::fill_n(out.data() + r * cols, cols, static_cast<float>(s));
  }
  return out;
}

}  // namespace r2r::kernels
