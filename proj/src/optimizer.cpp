#include "fedring/optimizer.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace fedring::ml {

double cosine_lr(std::uint64_t step, const OptimizerState& opt) {
  if (opt.total_steps == 0) return opt.lr_min;
  const double t = static_cast<double>(std::min(step, opt.total_steps)) / static_cast<double>(opt.total_steps);
  return opt.lr_min + 0.5 * (opt.lr_max - opt.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

wire::WeightSet zeros_like(const wire::WeightSet& w) {
  auto entries = w.entries();
  for (auto& e : entries) std::fill(e.data.begin(), e.data.end(), 0.0);
  return wire::WeightSet(std::move(entries));
}

}  // namespace

void adam_step(OptimizerState& opt, wire::WeightSet& weights, const wire::WeightSet& grads) {
  if (!grads.same_layout(weights))
    throw wire::WireError(wire::WireErrc::InvariantViolation, "gradient layout does not match weights");
  if (opt.first_moment.empty() && !weights.empty()) opt.first_moment = zeros_like(weights);
  if (opt.second_moment.empty() && !weights.empty()) opt.second_moment = zeros_like(weights);
  if (!opt.first_moment.same_layout(weights) || !opt.second_moment.same_layout(weights))
    throw wire::WireError(wire::WireErrc::InvariantViolation, "optimizer moments do not match weights");

  const double lr = cosine_lr(opt.step, opt);
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double bc1 = 1.0 - std::pow(opt.beta1, t);
  const double bc2 = 1.0 - std::pow(opt.beta2, t);

  auto& ws = weights.mutable_entries();
  auto& ms = opt.first_moment.mutable_entries();
  auto& vs = opt.second_moment.mutable_entries();
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto n = static_cast<Eigen::Index>(ws[i].data.size());
    Eigen::Map<Eigen::ArrayXd> w(ws[i].data.data(), n);
    Eigen::Map<Eigen::ArrayXd> m(ms[i].data.data(), n);
    Eigen::Map<Eigen::ArrayXd> v(vs[i].data.data(), n);
    Eigen::Map<const Eigen::ArrayXd> g(grads.entries()[i].data.data(), n);
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.square();
    w -= lr * (m / bc1) / ((v / bc2).sqrt() + opt.eps);
  }
}

}  // namespace fedring::ml
