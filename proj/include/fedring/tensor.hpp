#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedring/wire.hpp"

namespace fedring::ml {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor of doubles.
struct Tensor {
  std::vector<std::size_t> shape;
  wire::DoubleBuffer data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  /// Number of elements per index of the leading axis.
  std::size_t stride0() const { return shape.empty() ? 0 : data.size() / shape[0]; }

  std::span<double> slice0(std::size_t i) { return {data.data() + i * stride0(), stride0()}; }
  std::span<const double> slice0(std::size_t i) const { return {data.data() + i * stride0(), stride0()}; }

  bool operator==(const Tensor&) const = default;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_str(const std::vector<std::size_t>& shape);

// Per-sample volume ops. Activations are laid out [C, D, H, W].
namespace ops {

/// 3D convolution with cubic kernel `k`, zero padding k/2 and the given stride.
/// Weights are [cout, cin, k, k, k], bias [cout].
Tensor conv3d(const Tensor& x, std::span<const double> w, std::span<const double> b, std::size_t cout,
              std::size_t k, std::size_t stride);

/// Accumulates dW and db; writes dx when non-null.
void conv3d_backward(const Tensor& x, std::span<const double> w, const Tensor& dy, std::size_t k,
                     std::size_t stride, Tensor* dx, std::span<double> dw, std::span<double> db);

void relu_inplace(Tensor& t);
/// Zeroes dy wherever the ReLU output y was not positive.
void relu_backward(const Tensor& y, Tensor& dy);

/// Trilinear x2 upsampling (half-pixel centers, clamp at borders).
Tensor upsample2(const Tensor& x);
Tensor upsample2_backward(const Tensor& dy, const std::vector<std::size_t>& x_shape);

Tensor concat_channels(const Tensor& a, const Tensor& b);
void split_channels(const Tensor& d, std::size_t ca, Tensor& da, Tensor& db);

/// y = W x + b with W [out, in].
std::vector<double> dense(std::span<const double> x, std::span<const double> w, std::span<const double> b,
                          std::size_t out);
void dense_backward(std::span<const double> x, std::span<const double> w, std::span<const double> dy,
                    std::span<double> dx, std::span<double> dw, std::span<double> db);

/// Channel softmax of a [K, ...] tensor.
Tensor softmax_channels(const Tensor& logits);
/// Given probs and dL/dprobs, returns dL/dlogits.
Tensor softmax_channels_backward(const Tensor& probs, const Tensor& dprobs);

double softplus(double x);
double sigmoid(double x);

}  // namespace ops
}  // namespace fedring::ml
