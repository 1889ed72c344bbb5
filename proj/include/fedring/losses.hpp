#pragma once

#include <stdexcept>

#include "fedring/tensor.hpp"

namespace fedring::ml {

class NonPositiveSigma : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

inline constexpr double kDiceSmooth = 1e-5;
inline constexpr double kProbFloor = 1e-12;

struct LossWeights {
  double w_kl = 0.2;
  double w_recon = 0.3;
};

struct LossBreakdown {
  double dice = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double recon = 0.0;
  double total = 0.0;
};

// probs/labels are [B, K, ...]; labels one-hot. Sums run over batch and voxels jointly.

/// Soft Dice loss averaged over foreground classes present in `labels`
/// (background channel 0 excluded unless include_background). Returns 0 when
/// no included class is present.
double dice_loss(const Tensor& probs, const Tensor& labels, bool include_background = false);
Tensor dice_loss_grad(const Tensor& probs, const Tensor& labels, bool include_background = false);

/// Mean over voxels of -sum_k g_k log(max(p_k, 1e-12)).
double ce_loss(const Tensor& probs, const Tensor& labels);
Tensor ce_loss_grad(const Tensor& probs, const Tensor& labels);

/// Batch mean of sum_l 0.5 (mu^2 + sigma^2 - 1 - ln sigma^2); mu/sigma are [B, L].
double kl_loss(const Tensor& mu, const Tensor& sigma);
void kl_loss_grad(const Tensor& mu, const Tensor& sigma, Tensor& dmu, Tensor& dsigma);

/// Mean squared error over all elements.
double recon_loss(const Tensor& recon, const Tensor& input);
Tensor recon_loss_grad(const Tensor& recon, const Tensor& input);

/// L = dice + ce + w_kl * kl + w_recon * recon.
LossBreakdown combine_losses(double dice, double ce, double kl, double recon, const LossWeights& lw);

/// [B, D, H, W] integer labels -> [B, K, D, H, W] one-hot.
Tensor one_hot(const Tensor& labels, std::size_t n_classes);

}  // namespace fedring::ml
