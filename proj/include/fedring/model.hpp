#pragma once

#include <array>
#include <cstdint>
#include <random>

#include "fedring/losses.hpp"
#include "fedring/tensor.hpp"
#include "fedring/wire.hpp"

namespace fedring::ml {

using Rng = std::mt19937_64;

/// Encoder-decoder segmentation network with a VAE branch on the encoder endpoint.
///
/// Encoder level l has two 3x3x3 convs with f*2^l filters (the first one
/// strided for l > 0). Each decoder level upsamples trilinearly, concatenates
/// the matching encoder output and applies one conv; a 1x1 conv produces the
/// class logits. The VAE branch squeezes the bottleneck channels, flattens,
/// and maps to latent mean and softplus-sigma through two dense layers; the
/// reconstruction head expands the latent with one dense layer and climbs back
/// to input resolution through trilinear upsampling and residual conv blocks.
struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t n_classes = 3;
  std::size_t base_filters = 8;
  std::size_t n_levels = 3;
  std::size_t latent_dim = 128;
  /// Training patch extent (D, H, W); fixes the VAE dense layer sizes.
  std::array<std::size_t, 3> patch{16, 16, 16};

  std::size_t level_channels(std::size_t level) const { return base_filters << level; }
  std::size_t vae_channels() const { return std::max<std::size_t>(1, base_filters / 2); }
  std::size_t bottleneck_extent(std::size_t axis) const { return patch[axis] >> (n_levels - 1); }
  std::size_t vae_flat_size() const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

enum class Mode { Train, Eval };

struct ForwardOutput {
  Tensor logits;  // [B, K, D, H, W]
  Tensor probs;   // softmax of logits over K
  Tensor mu;      // [B, L]
  Tensor sigma;   // [B, L]
  Tensor recon;   // [B, C, D, H, W]
};

class SegModel {
 public:
  /// Zero-initialized weights.
  explicit SegModel(ModelConfig cfg);
  SegModel(ModelConfig cfg, wire::WeightSet weights);

  /// He-uniform conv/dense kernels, zero biases, drawn from `seed`.
  static SegModel initialized(const ModelConfig& cfg, std::uint64_t seed);
  /// Zero weight set with this configuration's names and shapes.
  static wire::WeightSet zero_weights(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const wire::WeightSet& weights() const { return weights_; }
  wire::WeightSet& mutable_weights() { return weights_; }
  /// Throws wire::WireError(InvariantViolation) on layout mismatch.
  void set_weights(wire::WeightSet w);

 private:
  ModelConfig cfg_;
  wire::WeightSet weights_;
};

/// Standard normal noise of shape [batch, latent_dim].
Tensor draw_latent_noise(std::size_t batch, std::size_t latent_dim, Rng& rng);

/// Train mode draws eps from `rng` (z = mu + sigma * eps); eval mode uses z = mu.
ForwardOutput forward(const SegModel& model, const Tensor& patch, Mode mode, Rng* rng = nullptr);
/// Forward with explicit latent noise; eps == nullptr means eval mode.
ForwardOutput forward_with_noise(const SegModel& model, const Tensor& patch, const Tensor* eps);

/// Segmentation path only, for inference on any extent divisible by 2^(n_levels-1).
/// Input [C, D, H, W], returns class probabilities [K, D, H, W].
Tensor segment_probs(const SegModel& model, const Tensor& volume);

struct GradientResult {
  wire::WeightSet grads;
  LossBreakdown loss;
};

/// `labels` holds integer class ids as [B, D, H, W].
GradientResult loss_and_gradient(const SegModel& model, const Tensor& patch, const Tensor& labels,
                                 const LossWeights& lw, const Tensor& eps);
GradientResult loss_and_gradient(const SegModel& model, const Tensor& patch, const Tensor& labels,
                                 const LossWeights& lw, Rng& rng);
wire::WeightSet backward(const SegModel& model, const Tensor& patch, const Tensor& labels, const LossWeights& lw,
                         Rng& rng);

LossBreakdown total_loss(const ForwardOutput& out, const Tensor& labels, const Tensor& input, const LossWeights& lw);

}  // namespace fedring::ml
