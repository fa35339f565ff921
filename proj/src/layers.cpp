#include "cbswr/layers.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cbswr/errors.hpp"

namespace cbswr {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw ConfigError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                      shape_string(shape));
  }
}

Tensor stack_rows(const std::vector<std::span<const double>>& rows, const Shape& row_shape) {
  const std::size_t per_row = shape_size(row_shape);
  Shape shape{rows.size()};
  shape.insert(shape.end(), row_shape.begin(), row_shape.end());
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != per_row) throw ConfigError("stack_rows: ragged rows");
    std::copy(rows[i].begin(), rows[i].end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * per_row));
  }
  return out;
}

}  // namespace cbswr

namespace cbswr::layers {

Tensor linear(const Tensor& x, std::span<const double> weight, std::span<const double> bias, std::size_t out_features) {
  const std::size_t n = x.dim(0);
  const std::size_t in = x.stride0();
  if (weight.size() != out_features * in) {
    throw ConfigError("linear: input width " + std::to_string(in) + " does not match weight");
  }
  Tensor y({n, out_features});
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data.data() + i * in;
    double* yi = y.data.data() + i * out_features;
    for (std::size_t o = 0; o < out_features; ++o) {
      const double* w = weight.data() + o * in;
      double s = bias.empty() ? 0.0 : bias[o];
      for (std::size_t k = 0; k < in; ++k) s += w[k] * xi[k];
      yi[o] = s;
    }
  }
  return y;
}

Tensor linear_backward(const Tensor& x, const Tensor& dy, std::span<const double> weight, std::span<double> d_weight,
                       std::span<double> d_bias) {
  const std::size_t n = x.dim(0);
  const std::size_t in = x.stride0();
  const std::size_t out = dy.stride0();
  Tensor dx(x.shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data.data() + i * in;
    const double* gi = dy.data.data() + i * out;
    double* dxi = dx.data.data() + i * in;
    for (std::size_t o = 0; o < out; ++o) {
      const double g = gi[o];
      if (!d_bias.empty()) d_bias[o] += g;
      const double* w = weight.data() + o * in;
      double* dw = d_weight.data() + o * in;
      for (std::size_t k = 0; k < in; ++k) {
        dw[k] += g * xi[k];
        dxi[k] += g * w[k];
      }
    }
  }
  return dx;
}

std::size_t conv_output_extent(std::size_t in, const ConvGeometry& g) {
  return (in + 2 * g.padding - g.kernel) / g.stride + 1;
}

std::size_t conv_transpose_output_extent(std::size_t in, const ConvGeometry& g) {
  return (in - 1) * g.stride + g.kernel - 2 * g.padding;
}

namespace {

struct ConvDims {
  std::size_t n, c_in, h, w, c_out, ho, wo;
};

// Shared index walk for conv2d and its transpose. Calls fn(n, ci, iy, ix, co, oy, ox, ky, kx)
// for every (input pixel, output pixel) pair connected by a kernel tap, where the
// "input" side is the strided/unpadded one.
template <typename Fn>
void for_each_tap(const ConvDims& d, const ConvGeometry& g, std::size_t strided_h, std::size_t strided_w,
                  std::size_t dense_h, std::size_t dense_w, Fn&& fn) {
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t sy = 0; sy < strided_h; ++sy)
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(sy * g.stride + ky) - pad;
        if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(dense_h)) continue;
        for (std::size_t sx = 0; sx < strided_w; ++sx)
          for (std::size_t kx = 0; kx < g.kernel; ++kx) {
            const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(sx * g.stride + kx) - pad;
            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(dense_w)) continue;
            fn(n, sy, sx, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), ky, kx);
          }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias, std::size_t out_channels,
              const ConvGeometry& g) {
  if (x.rank() != 4) throw ConfigError("conv2d: expected rank-4 input, got " + shape_string(x.shape));
  const ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), out_channels, conv_output_extent(x.dim(2), g),
                   conv_output_extent(x.dim(3), g)};
  const std::size_t kk = g.kernel * g.kernel;
  if (weight.size() != d.c_out * d.c_in * kk) throw ConfigError("conv2d: weight shape mismatch");
  Tensor y({d.n, d.c_out, d.ho, d.wo});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < d.c_out; ++co) {
      double* yp = y.data.data() + ((n * d.c_out + co) * d.ho) * d.wo;
      std::fill(yp, yp + d.ho * d.wo, bias.empty() ? 0.0 : bias[co]);
    }
  for_each_tap(d, g, d.ho, d.wo, d.h, d.w,
               [&](std::size_t n, std::size_t oy, std::size_t ox, std::size_t iy, std::size_t ix, std::size_t ky,
                   std::size_t kx) {
                 for (std::size_t co = 0; co < d.c_out; ++co) {
                   double s = 0.0;
                   for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                     s += weight[((co * d.c_in + ci) * g.kernel + ky) * g.kernel + kx] *
                          x.data[((n * d.c_in + ci) * d.h + iy) * d.w + ix];
                   }
                   y.data[((n * d.c_out + co) * d.ho + oy) * d.wo + ox] += s;
                 }
               });
  return y;
}

Tensor conv2d_backward(const Tensor& x, const Tensor& dy, std::span<const double> weight, std::span<double> d_weight,
                       std::span<double> d_bias, const ConvGeometry& g) {
  const ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), dy.dim(1), dy.dim(2), dy.dim(3)};
  Tensor dx(x.shape);
  if (!d_bias.empty()) {
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t co = 0; co < d.c_out; ++co) {
        const double* gp = dy.data.data() + ((n * d.c_out + co) * d.ho) * d.wo;
        double s = 0.0;
        for (std::size_t p = 0; p < d.ho * d.wo; ++p) s += gp[p];
        d_bias[co] += s;
      }
  }
  for_each_tap(d, g, d.ho, d.wo, d.h, d.w,
               [&](std::size_t n, std::size_t oy, std::size_t ox, std::size_t iy, std::size_t ix, std::size_t ky,
                   std::size_t kx) {
                 for (std::size_t co = 0; co < d.c_out; ++co) {
                   const double gy = dy.data[((n * d.c_out + co) * d.ho + oy) * d.wo + ox];
                   for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                     const std::size_t wi = ((co * d.c_in + ci) * g.kernel + ky) * g.kernel + kx;
                     const std::size_t xi = ((n * d.c_in + ci) * d.h + iy) * d.w + ix;
                     d_weight[wi] += gy * x.data[xi];
                     dx.data[xi] += gy * weight[wi];
                   }
                 }
               });
  return dx;
}

Tensor conv_transpose2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
                        std::size_t out_channels, const ConvGeometry& g) {
  if (x.rank() != 4) throw ConfigError("conv_transpose2d: expected rank-4 input, got " + shape_string(x.shape));
  const ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), out_channels, conv_transpose_output_extent(x.dim(2), g),
                   conv_transpose_output_extent(x.dim(3), g)};
  if (weight.size() != d.c_in * d.c_out * g.kernel * g.kernel) {
    throw ConfigError("conv_transpose2d: weight shape mismatch");
  }
  Tensor y({d.n, d.c_out, d.ho, d.wo});
  for (std::size_t n = 0; n < d.n; ++n)
    for (std::size_t co = 0; co < d.c_out; ++co) {
      double* yp = y.data.data() + ((n * d.c_out + co) * d.ho) * d.wo;
      std::fill(yp, yp + d.ho * d.wo, bias.empty() ? 0.0 : bias[co]);
    }
  // The strided side of a transposed conv is its input.
  for_each_tap(d, g, d.h, d.w, d.ho, d.wo,
               [&](std::size_t n, std::size_t iy, std::size_t ix, std::size_t oy, std::size_t ox, std::size_t ky,
                   std::size_t kx) {
                 for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                   const double xv = x.data[((n * d.c_in + ci) * d.h + iy) * d.w + ix];
                   for (std::size_t co = 0; co < d.c_out; ++co) {
                     y.data[((n * d.c_out + co) * d.ho + oy) * d.wo + ox] +=
                         xv * weight[((ci * d.c_out + co) * g.kernel + ky) * g.kernel + kx];
                   }
                 }
               });
  return y;
}

Tensor conv_transpose2d_backward(const Tensor& x, const Tensor& dy, std::span<const double> weight,
                                 std::span<double> d_weight, std::span<double> d_bias, const ConvGeometry& g) {
  const ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), dy.dim(1), dy.dim(2), dy.dim(3)};
  Tensor dx(x.shape);
  if (!d_bias.empty()) {
    for (std::size_t n = 0; n < d.n; ++n)
      for (std::size_t co = 0; co < d.c_out; ++co) {
        const double* gp = dy.data.data() + ((n * d.c_out + co) * d.ho) * d.wo;
        double s = 0.0;
        for (std::size_t p = 0; p < d.ho * d.wo; ++p) s += gp[p];
        d_bias[co] += s;
      }
  }
  for_each_tap(d, g, d.h, d.w, d.ho, d.wo,
               [&](std::size_t n, std::size_t iy, std::size_t ix, std::size_t oy, std::size_t ox, std::size_t ky,
                   std::size_t kx) {
                 for (std::size_t ci = 0; ci < d.c_in; ++ci) {
                   const std::size_t xi = ((n * d.c_in + ci) * d.h + iy) * d.w + ix;
                   const double xv = x.data[xi];
                   double acc = 0.0;
                   for (std::size_t co = 0; co < d.c_out; ++co) {
                     const std::size_t wi = ((ci * d.c_out + co) * g.kernel + ky) * g.kernel + kx;
                     const double gy = dy.data[((n * d.c_out + co) * d.ho + oy) * d.wo + ox];
                     d_weight[wi] += gy * xv;
                     acc += gy * weight[wi];
                   }
                   dx.data[xi] += acc;
                 }
               });
  return dx;
}

Tensor elu(const Tensor& x) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > 0.0 ? x.data[i] : std::expm1(x.data[i]);
  return y;
}

Tensor elu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) dx.data[i] = dy.data[i] * (x.data[i] > 0.0 ? 1.0 : std::exp(x.data[i]));
  return dx;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x.data[i];
    // Both branches stay in [0, 1] without overflow.
    if (v >= 0.0) {
      y.data[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y.data[i] = e / (1.0 + e);
    }
  }
  return y;
}

Tensor sigmoid_backward(const Tensor& y, const Tensor& dy) {
  Tensor dx(y.shape);
  for (std::size_t i = 0; i < y.size(); ++i) dx.data[i] = dy.data[i] * y.data[i] * (1.0 - y.data[i]);
  return dx;
}

Tensor l2_normalize_rows(const Tensor& x, std::vector<double>* norms) {
  Tensor y(x.shape);
  if (norms) norms->assign(x.dim(0), 0.0);
  for (std::size_t i = 0; i < x.dim(0); ++i) {
    const auto xi = x.row(i);
    const double nrm = std::sqrt(squared_norm(xi));
    if (!(nrm >= kMinEmbeddingNorm)) {
      throw DegenerateEmbeddingError("embedding row " + std::to_string(i) + " has pre-normalization norm " +
                                     std::to_string(nrm) + " < 1e-12");
    }
    auto yi = y.row(i);
    for (std::size_t k = 0; k < xi.size(); ++k) yi[k] = xi[k] / nrm;
    if (norms) (*norms)[i] = nrm;
  }
  return y;
}

Tensor l2_normalize_rows_backward(const Tensor& y, const std::vector<double>& norms, const Tensor& dy) {
  // d(x/|x|) = (I - y y^T) / |x|
  Tensor dx(y.shape);
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    const auto yi = y.row(i);
    const auto gi = dy.row(i);
    const double proj = dot(yi, gi);
    auto dxi = dx.row(i);
    for (std::size_t k = 0; k < yi.size(); ++k) dxi[k] = (gi[k] - proj * yi[k]) / norms[i];
  }
  return dx;
}

Tensor log_softmax_rows(const Tensor& logits) {
  Tensor out(logits.shape);
  for (std::size_t i = 0; i < logits.dim(0); ++i) {
    const auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    auto o = out.row(i);
    for (std::size_t k = 0; k < z.size(); ++k) o[k] = z[k] - lse;
  }
  return out;
}

Tensor softmax_rows(const Tensor& logits) {
  Tensor out = log_softmax_rows(logits);
  for (double& v : out.data) v = std::exp(v);
  return out;
}

}  // namespace cbswr::layers
