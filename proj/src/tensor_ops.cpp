#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedring/tensor.hpp"

namespace fedring::ml {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace ops {
namespace {

struct Geometry {
  std::size_t cin, d, h, w;
  std::size_t od, oh, ow;
  std::size_t k, stride, pad;
};

Geometry conv_geometry(const std::vector<std::size_t>& xs, std::size_t k, std::size_t stride) {
  if (xs.size() != 4) throw ShapeError("conv3d expects [C,D,H,W], got " + shape_str(xs));
  if (k % 2 == 0 || stride == 0) throw ShapeError("conv3d kernel must be odd and stride positive");
  Geometry g{xs[0], xs[1], xs[2], xs[3], 0, 0, 0, k, stride, k / 2};
  auto out = [&](std::size_t n) { return (n + 2 * g.pad - k) / stride + 1; };
  g.od = out(g.d);
  g.oh = out(g.h);
  g.ow = out(g.w);
  return g;
}

constexpr std::size_t kChunkCols = 8192;

// Fills cols[(ci,kz,ky,kx), j] for output slices [z0, z1).
void im2col(const Geometry& g, const double* x, std::size_t z0, std::size_t z1, RowMat& cols) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncols = (z1 - z0) * plane;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const double* xc = x + ci * g.d * g.h * g.w;
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          double* dst = cols.data() + row * ncols;
          for (std::size_t oz = z0; oz < z1; ++oz) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz) * s - pad + static_cast<std::ptrdiff_t>(kz);
            const bool zin = iz >= 0 && iz < static_cast<std::ptrdiff_t>(g.d);
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s - pad + static_cast<std::ptrdiff_t>(ky);
              double* drow = dst + ((oz - z0) * g.oh + oy) * g.ow;
              if (!zin || iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                std::fill(drow, drow + g.ow, 0.0);
                continue;
              }
              const double* src = xc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s - pad + static_cast<std::ptrdiff_t>(kx);
                drow[ox] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) ? src[ix] : 0.0;
              }
            }
          }
        }
  }
}

void col2im(const Geometry& g, const RowMat& cols, std::size_t z0, std::size_t z1, double* dx) {
  const std::size_t plane = g.oh * g.ow;
  const std::size_t ncols = (z1 - z0) * plane;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(g.pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(g.stride);
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    double* xc = dx + ci * g.d * g.h * g.w;
    for (std::size_t kz = 0; kz < g.k; ++kz)
      for (std::size_t ky = 0; ky < g.k; ++ky)
        for (std::size_t kx = 0; kx < g.k; ++kx, ++row) {
          const double* src = cols.data() + row * ncols;
          for (std::size_t oz = z0; oz < z1; ++oz) {
            const std::ptrdiff_t iz = static_cast<std::ptrdiff_t>(oz) * s - pad + static_cast<std::ptrdiff_t>(kz);
            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.d)) continue;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * s - pad + static_cast<std::ptrdiff_t>(ky);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              const double* srow = src + ((oz - z0) * g.oh + oy) * g.ow;
              double* drow = xc + (static_cast<std::size_t>(iz) * g.h + static_cast<std::size_t>(iy)) * g.w;
              for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * s - pad + static_cast<std::ptrdiff_t>(kx);
                if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) drow[ix] += srow[ox];
              }
            }
          }
        }
  }
}

std::size_t slices_per_chunk(const Geometry& g) {
  return std::max<std::size_t>(1, kChunkCols / std::max<std::size_t>(1, g.oh * g.ow));
}

}  // namespace

Tensor conv3d(const Tensor& x, std::span<const double> w, std::span<const double> b, std::size_t cout, std::size_t k,
              std::size_t stride) {
  const Geometry g = conv_geometry(x.shape, k, stride);
  const std::size_t krows = g.cin * k * k * k;
  if (w.size() != cout * krows || b.size() != cout)
    throw ShapeError("conv3d weight size mismatch for input " + shape_str(x.shape));
  Tensor y({cout, g.od, g.oh, g.ow});
  const std::size_t ovox = g.od * g.oh * g.ow;
  ConstMapMat W(w.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(krows));
  MapMat Y(y.data.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ovox));
  Eigen::Map<const Eigen::VectorXd> B(b.data(), static_cast<Eigen::Index>(cout));

  if (k == 1 && stride == 1) {
    ConstMapMat X(x.data.data(), static_cast<Eigen::Index>(g.cin), static_cast<Eigen::Index>(ovox));
    Y.noalias() = W * X;
  } else {
    const std::size_t step = slices_per_chunk(g);
    RowMat cols;
    for (std::size_t z0 = 0; z0 < g.od; z0 += step) {
      const std::size_t z1 = std::min(g.od, z0 + step);
      const auto ncols = static_cast<Eigen::Index>((z1 - z0) * g.oh * g.ow);
      cols.resize(static_cast<Eigen::Index>(krows), ncols);
      im2col(g, x.data.data(), z0, z1, cols);
      Y.middleCols(static_cast<Eigen::Index>(z0 * g.oh * g.ow), ncols).noalias() = W * cols;
    }
  }
  Y.colwise() += B;
  return y;
}

void conv3d_backward(const Tensor& x, std::span<const double> w, const Tensor& dy, std::size_t k, std::size_t stride,
                     Tensor* dx, std::span<double> dw, std::span<double> db) {
  const Geometry g = conv_geometry(x.shape, k, stride);
  const std::size_t cout = dy.shape.at(0);
  const std::size_t krows = g.cin * k * k * k;
  const std::size_t ovox = g.od * g.oh * g.ow;
  if (dy.numel() != cout * ovox) throw ShapeError("conv3d_backward: dy shape " + shape_str(dy.shape));
  ConstMapMat W(w.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(krows));
  ConstMapMat DY(dy.data.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(ovox));
  MapMat DW(dw.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(krows));
  for (std::size_t o = 0; o < cout; ++o) {
    const double* row = dy.data.data() + o * ovox;
    double acc = 0.0;
    for (std::size_t v = 0; v < ovox; ++v) acc += row[v];
    db[o] += acc;
  }

  if (dx) {
    dx->shape = x.shape;
    dx->data.assign(x.numel(), 0.0);
  }

  if (k == 1 && stride == 1) {
    ConstMapMat X(x.data.data(), static_cast<Eigen::Index>(g.cin), static_cast<Eigen::Index>(ovox));
    DW.noalias() += DY * X.transpose();
    if (dx) {
      MapMat DX(dx->data.data(), static_cast<Eigen::Index>(g.cin), static_cast<Eigen::Index>(ovox));
      DX.noalias() = W.transpose() * DY;
    }
    return;
  }

  const std::size_t step = slices_per_chunk(g);
  RowMat cols, dcols;
  for (std::size_t z0 = 0; z0 < g.od; z0 += step) {
    const std::size_t z1 = std::min(g.od, z0 + step);
    const auto ncols = static_cast<Eigen::Index>((z1 - z0) * g.oh * g.ow);
    const auto c0 = static_cast<Eigen::Index>(z0 * g.oh * g.ow);
    cols.resize(static_cast<Eigen::Index>(krows), ncols);
    im2col(g, x.data.data(), z0, z1, cols);
    DW.noalias() += DY.middleCols(c0, ncols) * cols.transpose();
    if (dx) {
      dcols.resize(static_cast<Eigen::Index>(krows), ncols);
      dcols.noalias() = W.transpose() * DY.middleCols(c0, ncols);
      col2im(g, dcols, z0, z1, dx->data.data());
    }
  }
}

void relu_inplace(Tensor& t) {
  for (auto& v : t.data) v = v > 0.0 ? v : 0.0;
}

void relu_backward(const Tensor& y, Tensor& dy) {
  for (std::size_t i = 0; i < dy.data.size(); ++i)
    if (!(y.data[i] > 0.0)) dy.data[i] = 0.0;
}

namespace {

struct Tap {
  std::size_t i0, i1;
  double f;
};

// Linear interpolation taps for doubling an axis of length n.
std::vector<Tap> upsample_taps(std::size_t n) {
  std::vector<Tap> taps(2 * n);
  for (std::size_t o = 0; o < 2 * n; ++o) {
    double src = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

// Interpolates along one axis of a tensor viewed as [outer, n, inner].
void interp_axis(const wire::DoubleBuffer& in, wire::DoubleBuffer& out, std::size_t outer, std::size_t n,
                 std::size_t inner, const std::vector<Tap>& taps) {
  const std::size_t m = taps.size();
  out.assign(outer * m * inner, 0.0);
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t o = 0; o < m; ++o) {
      const Tap t = taps[o];
      const double* s0 = in.data() + (a * n + t.i0) * inner;
      const double* s1 = in.data() + (a * n + t.i1) * inner;
      double* d = out.data() + (a * m + o) * inner;
      for (std::size_t c = 0; c < inner; ++c) d[c] = (1.0 - t.f) * s0[c] + t.f * s1[c];
    }
}

// Transpose of interp_axis: scatters out-gradients back onto the n input positions.
void interp_axis_t(const wire::DoubleBuffer& dout, wire::DoubleBuffer& din, std::size_t outer, std::size_t n,
                   std::size_t inner, const std::vector<Tap>& taps) {
  const std::size_t m = taps.size();
  din.assign(outer * n * inner, 0.0);
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t o = 0; o < m; ++o) {
      const Tap t = taps[o];
      const double* s = dout.data() + (a * m + o) * inner;
      double* d0 = din.data() + (a * n + t.i0) * inner;
      double* d1 = din.data() + (a * n + t.i1) * inner;
      for (std::size_t c = 0; c < inner; ++c) {
        d0[c] += (1.0 - t.f) * s[c];
        d1[c] += t.f * s[c];
      }
    }
}

}  // namespace

Tensor upsample2(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("upsample2 expects [C,D,H,W]");
  const std::size_t c = x.shape[0], d = x.shape[1], h = x.shape[2], w = x.shape[3];
  wire::DoubleBuffer a, bb;
  interp_axis(x.data, a, c * d * h, w, 1, upsample_taps(w));
  interp_axis(a, bb, c * d, h, 2 * w, upsample_taps(h));
  Tensor y;
  y.shape = {c, 2 * d, 2 * h, 2 * w};
  interp_axis(bb, y.data, c, d, 4 * h * w, upsample_taps(d));
  return y;
}

Tensor upsample2_backward(const Tensor& dy, const std::vector<std::size_t>& xs) {
  const std::size_t c = xs[0], d = xs[1], h = xs[2], w = xs[3];
  wire::DoubleBuffer a, bb;
  interp_axis_t(dy.data, a, c, d, 4 * h * w, upsample_taps(d));
  interp_axis_t(a, bb, c * d, h, 2 * w, upsample_taps(h));
  Tensor dx;
  dx.shape = xs;
  interp_axis_t(bb, dx.data, c * d * h, w, 1, upsample_taps(w));
  return dx;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.stride0() != b.stride0())
    throw ShapeError("concat_channels: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor y;
  y.shape = a.shape;
  y.shape[0] += b.shape[0];
  y.data.reserve(a.numel() + b.numel());
  y.data.insert(y.data.end(), a.data.begin(), a.data.end());
  y.data.insert(y.data.end(), b.data.begin(), b.data.end());
  return y;
}

void split_channels(const Tensor& d, std::size_t ca, Tensor& da, Tensor& db) {
  const std::size_t per = d.stride0();
  da.shape = d.shape;
  da.shape[0] = ca;
  db.shape = d.shape;
  db.shape[0] = d.shape[0] - ca;
  da.data.assign(d.data.begin(), d.data.begin() + static_cast<std::ptrdiff_t>(ca * per));
  db.data.assign(d.data.begin() + static_cast<std::ptrdiff_t>(ca * per), d.data.end());
}

// Dense layers are small; plain loops keep the summation order fixed.
std::vector<double> dense(std::span<const double> x, std::span<const double> w, std::span<const double> b,
                          std::size_t out) {
  if (w.size() != out * x.size() || b.size() != out) throw ShapeError("dense weight size mismatch");
  std::vector<double> y(out);
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < out; ++o) {
    const double* row = w.data() + o * in;
    double acc = 0.0;
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc + b[o];
  }
  return y;
}

void dense_backward(std::span<const double> x, std::span<const double> w, std::span<const double> dy,
                    std::span<double> dx, std::span<double> dw, std::span<double> db) {
  const std::size_t out = dy.size();
  const std::size_t in = x.size();
  if (!dx.empty()) std::fill(dx.begin(), dx.end(), 0.0);
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dy[o];
    db[o] += g;
    double* dwr = dw.data() + o * in;
    const double* wr = w.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) dwr[i] += g * x[i];
    if (!dx.empty())
      for (std::size_t i = 0; i < in; ++i) dx[i] += wr[i] * g;
  }
}

Tensor softmax_channels(const Tensor& logits) {
  const std::size_t k = logits.shape.at(0);
  const std::size_t n = logits.stride0();
  Tensor p(logits.shape);
  for (std::size_t v = 0; v < n; ++v) {
    double m = logits.data[v];
    for (std::size_t c = 1; c < k; ++c) m = std::max(m, logits.data[c * n + v]);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double e = std::exp(logits.data[c * n + v] - m);
      p.data[c * n + v] = e;
      s += e;
    }
    for (std::size_t c = 0; c < k; ++c) p.data[c * n + v] /= s;
  }
  return p;
}

Tensor softmax_channels_backward(const Tensor& probs, const Tensor& dprobs) {
  const std::size_t k = probs.shape.at(0);
  const std::size_t n = probs.stride0();
  Tensor dz(probs.shape);
  for (std::size_t v = 0; v < n; ++v) {
    double dot = 0.0;
    for (std::size_t c = 0; c < k; ++c) dot += probs.data[c * n + v] * dprobs.data[c * n + v];
    for (std::size_t c = 0; c < k; ++c) dz.data[c * n + v] = probs.data[c * n + v] * (dprobs.data[c * n + v] - dot);
  }
  return dz;
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace ops
}  // namespace fedring::ml
