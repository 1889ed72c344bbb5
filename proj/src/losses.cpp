#include "fedring/losses.hpp"

#include <algorithm>
#include <cmath>

namespace fedring::ml {
namespace {

struct Layout {
  std::size_t batch, classes, voxels;
};

Layout check_pair(const Tensor& probs, const Tensor& labels, const char* who) {
  if (probs.shape != labels.shape || probs.rank() < 2)
    throw ShapeError(std::string(who) + ": probs " + shape_str(probs.shape) + " vs labels " + shape_str(labels.shape));
  const std::size_t b = probs.shape[0], k = probs.shape[1];
  return {b, k, probs.numel() / (b * k)};
}

struct ClassSums {
  double inter = 0.0, p = 0.0, g = 0.0;
};

std::vector<ClassSums> class_sums(const Tensor& probs, const Tensor& labels, const Layout& L) {
  std::vector<ClassSums> s(L.classes);
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t k = 0; k < L.classes; ++k) {
      const std::size_t base = (b * L.classes + k) * L.voxels;
      auto& acc = s[k];
      for (std::size_t v = 0; v < L.voxels; ++v) {
        const double p = probs.data[base + v], g = labels.data[base + v];
        acc.inter += p * g;
        acc.p += p;
        acc.g += g;
      }
    }
  return s;
}

}  // namespace

double dice_loss(const Tensor& probs, const Tensor& labels, bool include_background) {
  const Layout L = check_pair(probs, labels, "dice_loss");
  const auto s = class_sums(probs, labels, L);
  double acc = 0.0;
  std::size_t included = 0;
  for (std::size_t k = include_background ? 0 : 1; k < L.classes; ++k) {
    if (s[k].g <= 0.0) continue;  // absent class
    acc += (2.0 * s[k].inter + kDiceSmooth) / (s[k].p + s[k].g + kDiceSmooth);
    ++included;
  }
  return included == 0 ? 0.0 : 1.0 - acc / static_cast<double>(included);
}

Tensor dice_loss_grad(const Tensor& probs, const Tensor& labels, bool include_background) {
  const Layout L = check_pair(probs, labels, "dice_loss");
  const auto s = class_sums(probs, labels, L);
  Tensor grad(probs.shape);
  std::size_t included = 0;
  for (std::size_t k = include_background ? 0 : 1; k < L.classes; ++k)
    if (s[k].g > 0.0) ++included;
  if (included == 0) return grad;
  for (std::size_t k = include_background ? 0 : 1; k < L.classes; ++k) {
    if (s[k].g <= 0.0) continue;
    const double num = 2.0 * s[k].inter + kDiceSmooth;
    const double den = s[k].p + s[k].g + kDiceSmooth;
    const double scale = -1.0 / static_cast<double>(included);
    for (std::size_t b = 0; b < L.batch; ++b) {
      const std::size_t base = (b * L.classes + k) * L.voxels;
      for (std::size_t v = 0; v < L.voxels; ++v)
        grad.data[base + v] = scale * (2.0 * labels.data[base + v] * den - num) / (den * den);
    }
  }
  return grad;
}

double ce_loss(const Tensor& probs, const Tensor& labels) {
  const Layout L = check_pair(probs, labels, "ce_loss");
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    const double g = labels.data[i];
    if (g != 0.0) acc -= g * std::log(std::clamp(probs.data[i], kProbFloor, 1.0));
  }
  return acc / static_cast<double>(L.batch * L.voxels);
}

Tensor ce_loss_grad(const Tensor& probs, const Tensor& labels) {
  const Layout L = check_pair(probs, labels, "ce_loss");
  Tensor grad(probs.shape);
  const double n = static_cast<double>(L.batch * L.voxels);
  for (std::size_t i = 0; i < probs.numel(); ++i) {
    const double g = labels.data[i], p = probs.data[i];
    if (g != 0.0 && p > kProbFloor && p <= 1.0) grad.data[i] = -g / (p * n);
  }
  return grad;
}

double kl_loss(const Tensor& mu, const Tensor& sigma) {
  if (mu.shape != sigma.shape || mu.rank() != 2) throw ShapeError("kl_loss: mu/sigma must both be [B,L]");
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const double m = mu.data[i], s = sigma.data[i];
    if (!(s > 0.0)) throw NonPositiveSigma("kl_loss: sigma must be positive");
    acc += 0.5 * (m * m + s * s - 1.0 - std::log(s * s));
  }
  return acc / static_cast<double>(mu.shape[0]);
}

void kl_loss_grad(const Tensor& mu, const Tensor& sigma, Tensor& dmu, Tensor& dsigma) {
  if (mu.shape != sigma.shape || mu.rank() != 2) throw ShapeError("kl_loss: mu/sigma must both be [B,L]");
  const double inv_b = 1.0 / static_cast<double>(mu.shape[0]);
  dmu = Tensor(mu.shape);
  dsigma = Tensor(sigma.shape);
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const double s = sigma.data[i];
    if (!(s > 0.0)) throw NonPositiveSigma("kl_loss: sigma must be positive");
    dmu.data[i] = mu.data[i] * inv_b;
    dsigma.data[i] = (s - 1.0 / s) * inv_b;
  }
}

double recon_loss(const Tensor& recon, const Tensor& input) {
  if (recon.shape != input.shape) throw ShapeError("recon_loss: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < recon.numel(); ++i) {
    const double d = recon.data[i] - input.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(recon.numel());
}

Tensor recon_loss_grad(const Tensor& recon, const Tensor& input) {
  if (recon.shape != input.shape) throw ShapeError("recon_loss: shape mismatch");
  Tensor grad(recon.shape);
  const double scale = 2.0 / static_cast<double>(recon.numel());
  for (std::size_t i = 0; i < recon.numel(); ++i) grad.data[i] = scale * (recon.data[i] - input.data[i]);
  return grad;
}

LossBreakdown combine_losses(double dice, double ce, double kl, double recon, const LossWeights& lw) {
  return {dice, ce, kl, recon, dice + ce + lw.w_kl * kl + lw.w_recon * recon};
}

Tensor one_hot(const Tensor& labels, std::size_t n_classes) {
  if (labels.rank() < 1) throw ShapeError("one_hot: labels need a batch axis");
  const std::size_t b = labels.shape[0];
  const std::size_t n = labels.numel() / b;
  std::vector<std::size_t> shape = labels.shape;
  shape.insert(shape.begin() + 1, n_classes);
  Tensor out(shape);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t v = 0; v < n; ++v) {
      const auto k = static_cast<std::size_t>(labels.data[i * n + v]);
      if (k >= n_classes) throw ShapeError("one_hot: label " + std::to_string(k) + " out of range");
      out.data[(i * n_classes + k) * n + v] = 1.0;
    }
  return out;
}

}  // namespace fedring::ml
