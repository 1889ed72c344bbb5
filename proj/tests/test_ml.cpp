#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fedring/losses.hpp"
#include "fedring/model.hpp"
#include "fedring/optimizer.hpp"

using namespace fedring::ml;
using fedring::wire::WeightSet;

namespace {

ModelConfig small_config(std::size_t latent = 8) {
  ModelConfig c;
  c.in_channels = 1;
  c.n_classes = 3;
  c.base_filters = 4;
  c.n_levels = 2;
  c.latent_dim = latent;
  c.patch = {8, 8, 8};
  return c;
}

Tensor random_patch(std::size_t b, const ModelConfig& c, Rng& rng) {
  Tensor t({b, c.in_channels, c.patch[0], c.patch[1], c.patch[2]});
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (auto& v : t.data) v = u(rng);
  return t;
}

Tensor random_labels(std::size_t b, const ModelConfig& c, Rng& rng) {
  Tensor t({b, c.patch[0], c.patch[1], c.patch[2]});
  std::uniform_int_distribution<int> u(0, static_cast<int>(c.n_classes) - 1);
  for (auto& v : t.data) v = u(rng);
  return t;
}

double loss_at(const SegModel& m, const Tensor& patch, const Tensor& labels, const LossWeights& lw,
               const Tensor& eps) {
  return total_loss(forward_with_noise(m, patch, &eps), labels, patch, lw).total;
}

}  // namespace

TEST_CASE("dice_loss anchors") {
  // 4 voxels, K=2; foreground channel g = [1,1,0,0], p = 0.5 everywhere.
  Tensor probs({1, 2, 4}, 0.5);
  Tensor labels({1, 2, 4});
  const double g[4] = {1, 1, 0, 0};
  for (int v = 0; v < 4; ++v) {
    labels.data[4 + v] = g[v];
    labels.data[v] = 1.0 - g[v];
  }
  const double expected = 1.0 - (2.0 * 1.0 + kDiceSmooth) / (2.0 + 2.0 + kDiceSmooth);
  CHECK(dice_loss(probs, labels) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(dice_loss(probs, labels) == doctest::Approx(0.5).epsilon(1e-5));

  CHECK(dice_loss(labels, labels) <= 1e-4);

  Tensor disjoint = labels;
  for (int v = 0; v < 4; ++v) std::swap(disjoint.data[v], disjoint.data[4 + v]);
  CHECK(dice_loss(disjoint, labels) == doctest::Approx(1.0).epsilon(1e-5));

  CHECK_THROWS_AS(dice_loss(Tensor({1, 2, 3}), labels), ShapeError);
}

TEST_CASE("dice_loss skips absent classes and excludes background") {
  Tensor labels({1, 3, 2});
  labels.data = {1, 0, 0, 1, 0, 0};  // class 1 present on voxel 1, class 2 absent
  Tensor probs = labels;
  CHECK(dice_loss(probs, labels) <= 1e-6);
  Tensor all_bg({1, 3, 2});
  all_bg.data = {1, 1, 0, 0, 0, 0};
  CHECK(dice_loss(all_bg, all_bg) == 0.0);
  CHECK(dice_loss(all_bg, all_bg, true) <= 1e-6);
}

TEST_CASE("ce_loss anchors") {
  Tensor uniform({1, 2, 5}, 0.5);
  Tensor labels({1, 2, 5});
  for (int v = 0; v < 5; ++v) labels.data[v] = 1.0;
  CHECK(std::abs(ce_loss(uniform, labels) - std::log(2.0)) < 1e-12);
  CHECK(ce_loss(labels, labels) == doctest::Approx(0.0));

  Tensor quarter({1, 4, 3}, 0.25);
  Tensor lab4({1, 4, 3});
  for (int v = 0; v < 3; ++v) lab4.data[2 * 3 + v] = 1.0;
  CHECK(ce_loss(quarter, lab4) == doctest::Approx(1.386294).epsilon(1e-6));

  // Zero probability is clamped rather than producing inf.
  Tensor zero({1, 2, 1});
  zero.data = {0.0, 1.0};
  Tensor lab({1, 2, 1});
  lab.data = {1.0, 0.0};
  CHECK(ce_loss(zero, lab) == doctest::Approx(-std::log(1e-12)));
}

TEST_CASE("kl_loss anchors") {
  CHECK(kl_loss(Tensor({2, 3}, 0.0), Tensor({2, 3}, 1.0)) == 0.0);
  CHECK(kl_loss(Tensor({1, 1}, 1.0), Tensor({1, 1}, 1.0)) == doctest::Approx(0.5));
  CHECK(kl_loss(Tensor({1, 1}, 0.0), Tensor({1, 1}, 2.0)) == doctest::Approx(0.806853).epsilon(1e-6));
  CHECK_THROWS_AS(kl_loss(Tensor({1, 1}, 0.0), Tensor({1, 1}, 0.0)), NonPositiveSigma);
}

TEST_CASE("recon_loss anchors") {
  Tensor x({2}, 0.0);
  x.data = {1.0, 2.0};
  CHECK(recon_loss(Tensor({2}, 0.0), x) == doctest::Approx(2.5));
  CHECK(recon_loss(x, x) == 0.0);
  Tensor shifted = x;
  for (auto& v : shifted.data) v += 1.0;
  CHECK(recon_loss(shifted, x) == doctest::Approx(1.0));
}

TEST_CASE("total loss composition") {
  CHECK(combine_losses(1, 1, 1, 1, {0.2, 0.3}).total == doctest::Approx(2.5));
  CHECK(combine_losses(0.4, 0.7, 9, 9, {0, 0}).total == doctest::Approx(1.1));
  const LossWeights defaults;
  CHECK(defaults.w_kl == 0.2);
  CHECK(defaults.w_recon == 0.3);
}

TEST_CASE("forward on zero weights is uniform") {
  const auto cfg = small_config();
  SegModel m(cfg);
  Rng rng(1);
  const Tensor patch = random_patch(2, cfg, rng);
  const auto out = forward(m, patch, Mode::Eval);
  CHECK(out.logits.shape == std::vector<std::size_t>{2, 3, 8, 8, 8});
  CHECK(out.recon.shape == patch.shape);
  CHECK(out.mu.shape == std::vector<std::size_t>{2, cfg.latent_dim});
  for (double p : out.probs.data) CHECK(p == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("eval forward is deterministic and train with zero noise matches eval") {
  const auto cfg = small_config();
  const SegModel m = SegModel::initialized(cfg, 7);
  Rng rng(3);
  const Tensor patch = random_patch(2, cfg, rng);
  const auto a = forward(m, patch, Mode::Eval);
  const auto b = forward(m, patch, Mode::Eval);
  CHECK(a.logits == b.logits);
  CHECK(a.recon == b.recon);
  const Tensor zero_eps({2, cfg.latent_dim});
  const auto t = forward_with_noise(m, patch, &zero_eps);
  CHECK(t.logits == a.logits);
  CHECK(t.recon == a.recon);
  for (double s : a.sigma.data) CHECK(s > 0.0);

  // Softmax sums to one per voxel.
  const std::size_t n = 8 * 8 * 8;
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t v = 0; v < n; ++v) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += a.probs.data[(bi * 3 + k) * n + v];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
}

TEST_CASE("forward rejects mismatched patch extents") {
  const auto cfg = small_config();
  SegModel m(cfg);
  CHECK_THROWS_AS(forward(m, Tensor({1, 1, 8, 8, 6}), Mode::Eval), ShapeError);
  auto bad = cfg;
  bad.patch = {8, 8, 6};
  bad.n_levels = 3;
  CHECK_THROWS_AS(SegModel{bad}, ShapeError);
  CHECK_THROWS_AS(segment_probs(m, Tensor({1, 8, 8, 7})), ShapeError);
}

TEST_CASE("segment_probs matches the segmentation head of forward") {
  const auto cfg = small_config();
  const SegModel m = SegModel::initialized(cfg, 11);
  Rng rng(5);
  const Tensor patch = random_patch(1, cfg, rng);
  const auto out = forward(m, patch, Mode::Eval);
  Tensor vol({1, 8, 8, 8});
  vol.data = patch.data;
  const Tensor probs = segment_probs(m, vol);
  REQUIRE(probs.numel() == out.probs.numel());
  for (std::size_t i = 0; i < probs.numel(); ++i) CHECK(probs.data[i] == out.probs.data[i]);
}

TEST_CASE("analytic gradient matches central finite differences") {
  const auto cfg = small_config(8);
  const SegModel model = SegModel::initialized(cfg, 42);
  Rng rng(2024);
  const Tensor patch = random_patch(2, cfg, rng);
  const Tensor labels = random_labels(2, cfg, rng);
  const LossWeights lw{0.2, 0.3};
  const Tensor eps = draw_latent_noise(2, cfg.latent_dim, rng);
  const auto analytic = loss_and_gradient(model, patch, labels, lw, eps);
  CHECK(analytic.loss.total == doctest::Approx(loss_at(model, patch, labels, lw, eps)).epsilon(1e-12));

  const double h = 1e-5;
  SegModel probe = model;
  for (const auto& entry : model.weights().entries()) {
    const auto& g = analytic.grads.at(entry.name).data;
    double diff2 = 0, an2 = 0, fd2 = 0;
    for (std::size_t i = 0; i < entry.data.size(); ++i) {
      auto& w = probe.mutable_weights().at(entry.name).data[i];
      const double orig = w;
      w = orig + h;
      const double up = loss_at(probe, patch, labels, lw, eps);
      w = orig - h;
      const double dn = loss_at(probe, patch, labels, lw, eps);
      w = orig;
      const double fd = (up - dn) / (2 * h);
      diff2 += (fd - g[i]) * (fd - g[i]);
      an2 += g[i] * g[i];
      fd2 += fd * fd;
    }
    const double rel = std::sqrt(diff2) / std::max({std::sqrt(an2), std::sqrt(fd2), 1e-12});
    INFO(entry.name << " rel err " << rel);
    CHECK(rel < 1e-4);
  }
}

TEST_CASE("recon-head gradient is linear in w_recon") {
  const auto cfg = small_config();
  const SegModel model = SegModel::initialized(cfg, 9);
  Rng rng(8);
  const Tensor patch = random_patch(1, cfg, rng);
  const Tensor labels = random_labels(1, cfg, rng);
  const Tensor eps = draw_latent_noise(1, cfg.latent_dim, rng);
  const auto g1 = loss_and_gradient(model, patch, labels, {0.0, 0.3}, eps).grads.at("vae.out.w").data;
  const auto g2 = loss_and_gradient(model, patch, labels, {0.0, 0.6}, eps).grads.at("vae.out.w").data;
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == doctest::Approx(2.0 * g1[i]).epsilon(1e-12));
}

TEST_CASE("perfect crisp fit gives near-zero gradients") {
  const auto cfg = small_config();
  SegModel model(cfg);
  model.mutable_weights().at("head.b").data = {60.0, 0.0, 0.0};
  Rng rng(1);
  const Tensor patch = random_patch(1, cfg, rng);
  const Tensor labels({1, 8, 8, 8}, 0.0);
  const auto res = loss_and_gradient(model, patch, labels, {0.0, 0.0}, rng);
  CHECK(res.loss.total < 1e-20);
  for (const auto& e : res.grads.entries())
    for (double v : e.data) CHECK(std::abs(v) < 1e-20);
}

TEST_CASE("backward is deterministic for a seed") {
  const auto cfg = small_config();
  const SegModel model = SegModel::initialized(cfg, 3);
  Rng data_rng(4);
  const Tensor patch = random_patch(2, cfg, data_rng);
  const Tensor labels = random_labels(2, cfg, data_rng);
  Rng r1(99), r2(99);
  CHECK(backward(model, patch, labels, {}, r1) == backward(model, patch, labels, {}, r2));
}

TEST_CASE("cosine learning rate anchors") {
  OptimizerState opt;
  opt.total_steps = 1000;
  CHECK(cosine_lr(0, opt) == 1e-4);
  CHECK(cosine_lr(1000, opt) == 1e-5);
  CHECK(cosine_lr(5000, opt) == 1e-5);
  CHECK(cosine_lr(500, opt) == doctest::Approx(5.5e-5).epsilon(1e-12));
  for (std::uint64_t s = 1; s <= 1000; ++s) CHECK(cosine_lr(s, opt) <= cosine_lr(s - 1, opt));
}

TEST_CASE("adam step behaviour") {
  WeightSet w({{"w", {1}, {2.0}}});
  WeightSet zero({{"w", {1}, {0.0}}});
  OptimizerState opt;
  opt.total_steps = 10;
  adam_step(opt, w, zero);
  CHECK(w.at("w").data[0] == 2.0);
  CHECK(opt.step == 1);

  WeightSet one({{"w", {1}, {1.0}}});
  double prev = w.at("w").data[0];
  for (int i = 0; i < 20; ++i) {
    adam_step(opt, w, one);
    CHECK(w.at("w").data[0] < prev);
    prev = w.at("w").data[0];
  }

  WeightSet other({{"v", {1}, {1.0}}});
  CHECK_THROWS(adam_step(opt, w, other));
}

TEST_CASE("adam converges on a convex scalar problem") {
  WeightSet w({{"w", {1}, {0.0}}});
  OptimizerState opt;
  opt.lr_max = 1e-1;
  opt.lr_min = 1e-2;
  opt.total_steps = 2000;
  int steps = 0;
  while (steps < 2000) {
    const double x = w.at("w").data[0];
    WeightSet g({{"w", {1}, {2.0 * (x - 3.0)}}});
    adam_step(opt, w, g);
    ++steps;
  }
  CHECK(std::abs(w.at("w").data[0] - 3.0) < 1e-2);
}

TEST_CASE("loss moving average decreases while overfitting one patch") {
  auto cfg = small_config(16);
  SegModel model = SegModel::initialized(cfg, 1);
  Rng rng(12);
  // Four copies of the same patch average out some of the latent sampling noise.
  constexpr std::size_t kCopies = 4;
  Tensor patch({kCopies, 1, 8, 8, 8});
  Tensor labels({kCopies, 8, 8, 8});
  for (std::size_t b = 0; b < kCopies; ++b)
    for (std::size_t z = 0; z < 8; ++z)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const std::size_t i = b * 512 + (z * 8 + y) * 8 + x;
          const bool fg = (x >= 2 && x < 6 && y >= 2 && y < 6 && z >= 2 && z < 6);
          const bool tumor = fg && x >= 3 && x < 5 && y >= 3 && y < 5 && z >= 3 && z < 5;
          labels.data[i] = tumor ? 2 : (fg ? 1 : 0);
          patch.data[i] = tumor ? -0.3 : (fg ? 0.5 : -0.1);
        }
  OptimizerState opt;
  opt.lr_max = 1e-2;
  opt.lr_min = 1e-3;
  opt.total_steps = 209;
  std::vector<double> losses;
  for (int s = 0; s < 209; ++s) {
    auto res = loss_and_gradient(model, patch, labels, {}, rng);
    losses.push_back(res.loss.total);
    adam_step(opt, model.mutable_weights(), res.grads);
  }
  std::vector<double> avg;
  for (std::size_t i = 0; i + 10 <= losses.size(); ++i)
    avg.push_back(std::accumulate(losses.begin() + static_cast<long>(i), losses.begin() + static_cast<long>(i + 10), 0.0) / 10.0);
  REQUIRE(avg.size() == 200);
  int violations = 0;
  for (std::size_t i = 1; i < avg.size(); ++i)
    if (!(avg[i] < avg[i - 1])) ++violations;
  CHECK(violations == 0);
  CHECK(losses.back() < 0.5 * losses.front());
}
