#include "fedring/model.hpp"

#include <algorithm>
#include <cmath>

namespace fedring::ml {

namespace {

std::string lvl(const char* prefix, std::size_t l, const char* suffix) {
  return std::string(prefix) + std::to_string(l) + suffix;
}

struct ParamSpec {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::size_t fan_in;  // 0 for biases
};

std::vector<std::uint32_t> conv_shape(std::size_t cout, std::size_t cin, std::size_t k) {
  const auto kk = static_cast<std::uint32_t>(k);
  return {static_cast<std::uint32_t>(cout), static_cast<std::uint32_t>(cin), kk, kk, kk};
}

std::vector<ParamSpec> param_specs(const ModelConfig& c) {
  std::vector<ParamSpec> out;
  auto conv = [&](const std::string& base, std::size_t cout, std::size_t cin, std::size_t k) {
    out.push_back({base + ".w", conv_shape(cout, cin, k), cin * k * k * k});
    out.push_back({base + ".b", {static_cast<std::uint32_t>(cout)}, 0});
  };
  auto dense = [&](const std::string& base, std::size_t nout, std::size_t nin) {
    out.push_back({base + ".w", {static_cast<std::uint32_t>(nout), static_cast<std::uint32_t>(nin)}, nin});
    out.push_back({base + ".b", {static_cast<std::uint32_t>(nout)}, 0});
  };
  const std::size_t L = c.n_levels;
  for (std::size_t l = 0; l < L; ++l) {
    conv(lvl("enc", l, ".a"), c.level_channels(l), l == 0 ? c.in_channels : c.level_channels(l - 1), 3);
    conv(lvl("enc", l, ".b"), c.level_channels(l), c.level_channels(l), 3);
  }
  for (std::size_t l = 0; l + 1 < L; ++l)
    conv(lvl("dec", l, ""), c.level_channels(l), c.level_channels(l + 1) + c.level_channels(l), 3);
  conv("head", c.n_classes, c.level_channels(0), 1);

  const std::size_t cv = c.vae_channels();
  const std::size_t flat = c.vae_flat_size();
  conv("vae.squeeze", cv, c.level_channels(L - 1), 3);
  dense("vae.mu", c.latent_dim, flat);
  dense("vae.sigma", c.latent_dim, flat);
  dense("vae.expand", flat, c.latent_dim);
  for (std::size_t l = 0; l + 1 < L; ++l) {
    conv(lvl("vae.up", l, ".a"), cv, cv, 3);
    conv(lvl("vae.up", l, ".b"), cv, cv, 3);
  }
  conv("vae.out", c.in_channels, cv, 1);
  return out;
}

// Read-only parameter view plus matching gradient slots.
struct Params {
  const wire::WeightSet& w;
  std::span<const double> operator()(const std::string& name) const { return w.at(name).data; }
};

struct Grads {
  wire::WeightSet& g;
  std::span<double> operator()(const std::string& name) { return g.at(name).data; }
};

struct SampleCache {
  Tensor x;
  std::vector<Tensor> a, e;            // encoder: after conv a (+relu), after conv b (+relu)
  std::vector<Tensor> up, cat, d;      // decoder per level
  Tensor probs;
  Tensor s;                            // squeezed bottleneck
  std::vector<double> mu, sraw, sigma, z, h;
  std::vector<Tensor> vu, vr, vh;      // VAE upsample chain
  Tensor recon;
};

Tensor conv_relu(const Tensor& x, const Params& P, const std::string& base, std::size_t cout, std::size_t stride) {
  Tensor y = ops::conv3d(x, P(base + ".w"), P(base + ".b"), cout, 3, stride);
  ops::relu_inplace(y);
  return y;
}

Tensor seg_forward(const ModelConfig& c, const Params& P, const Tensor& x, SampleCache* cache, Tensor* logits_out) {
  const std::size_t L = c.n_levels;
  std::vector<Tensor> a(L), e(L);
  for (std::size_t l = 0; l < L; ++l) {
    const Tensor& in = l == 0 ? x : e[l - 1];
    a[l] = conv_relu(in, P, lvl("enc", l, ".a"), c.level_channels(l), l == 0 ? 1 : 2);
    e[l] = conv_relu(a[l], P, lvl("enc", l, ".b"), c.level_channels(l), 1);
  }
  std::vector<Tensor> up(L > 1 ? L - 1 : 0), cat(up.size()), d(up.size());
  const Tensor* cur = &e[L - 1];
  for (std::size_t l = L - 1; l-- > 0;) {
    up[l] = ops::upsample2(*cur);
    cat[l] = ops::concat_channels(up[l], e[l]);
    d[l] = conv_relu(cat[l], P, lvl("dec", l, ""), c.level_channels(l), 1);
    cur = &d[l];
  }
  Tensor logits = ops::conv3d(*cur, P("head.w"), P("head.b"), c.n_classes, 1, 1);
  Tensor probs = ops::softmax_channels(logits);
  if (logits_out) *logits_out = std::move(logits);
  if (cache) {
    cache->x = x;
    cache->a = std::move(a);
    cache->e = std::move(e);
    cache->up = std::move(up);
    cache->cat = std::move(cat);
    cache->d = std::move(d);
    cache->probs = probs;
  }
  return probs;
}

void vae_forward(const ModelConfig& c, const Params& P, SampleCache& s, std::span<const double> eps) {
  const std::size_t L = c.n_levels;
  const std::size_t cv = c.vae_channels();
  s.s = conv_relu(s.e[L - 1], P, "vae.squeeze", cv, 1);
  s.mu = ops::dense(s.s.data, P("vae.mu.w"), P("vae.mu.b"), c.latent_dim);
  s.sraw = ops::dense(s.s.data, P("vae.sigma.w"), P("vae.sigma.b"), c.latent_dim);
  s.sigma.resize(c.latent_dim);
  s.z.resize(c.latent_dim);
  for (std::size_t i = 0; i < c.latent_dim; ++i) {
    s.sigma[i] = ops::softplus(s.sraw[i]);
    s.z[i] = eps.empty() ? s.mu[i] : s.mu[i] + s.sigma[i] * eps[i];
  }
  s.h = ops::dense(s.z, P("vae.expand.w"), P("vae.expand.b"), c.vae_flat_size());
  for (auto& v : s.h) v = v > 0.0 ? v : 0.0;

  Tensor cur({cv, c.bottleneck_extent(0), c.bottleneck_extent(1), c.bottleneck_extent(2)});
  cur.data.assign(s.h.begin(), s.h.end());
  s.vu.assign(L - 1, {});
  s.vr.assign(L - 1, {});
  s.vh.assign(L - 1, {});
  for (std::size_t l = 0; l + 1 < L; ++l) {
    s.vu[l] = ops::upsample2(cur);
    s.vr[l] = conv_relu(s.vu[l], P, lvl("vae.up", l, ".a"), cv, 1);
    Tensor res = ops::conv3d(s.vr[l], P(lvl("vae.up", l, ".b.w")), P(lvl("vae.up", l, ".b.b")), cv, 3, 1);
    for (std::size_t i = 0; i < res.numel(); ++i) res.data[i] += s.vu[l].data[i];
    s.vh[l] = std::move(res);
    cur = s.vh[l];
  }
  s.recon = ops::conv3d(cur, P("vae.out.w"), P("vae.out.b"), c.in_channels, 1, 1);
}

void check_patch(const ModelConfig& c, const Tensor& patch) {
  if (patch.rank() != 5 || patch.shape[1] != c.in_channels)
    throw ShapeError("patch must be [B," + std::to_string(c.in_channels) + ",D,H,W], got " + shape_str(patch.shape));
  for (std::size_t a = 0; a < 3; ++a)
    if (patch.shape[2 + a] != c.patch[a])
      throw ShapeError("patch extent " + shape_str(patch.shape) + " does not match model patch size");
}

Tensor stack(const std::vector<Tensor>& parts) {
  Tensor out;
  out.shape = parts.front().shape;
  out.shape.insert(out.shape.begin(), parts.size());
  out.data.reserve(parts.size() * parts.front().numel());
  for (const auto& p : parts) out.data.insert(out.data.end(), p.data.begin(), p.data.end());
  return out;
}

Tensor sample_of(const Tensor& batch, std::size_t b) {
  Tensor t;
  t.shape.assign(batch.shape.begin() + 1, batch.shape.end());
  auto s = batch.slice0(b);
  t.data.assign(s.begin(), s.end());
  return t;
}

struct BatchForward {
  std::vector<SampleCache> caches;
  ForwardOutput out;
};

BatchForward run_forward(const SegModel& model, const Tensor& patch, const Tensor* eps) {
  const auto& c = model.config();
  check_patch(c, patch);
  const std::size_t B = patch.shape[0];
  if (eps && (eps->rank() != 2 || eps->shape[0] != B || eps->shape[1] != c.latent_dim))
    throw ShapeError("latent noise must be [B, latent_dim]");
  const Params P{model.weights()};
  BatchForward bf;
  bf.caches.resize(B);
  std::vector<Tensor> logits(B), probs(B), recon(B);
  bf.out.mu = Tensor({B, c.latent_dim});
  bf.out.sigma = Tensor({B, c.latent_dim});
  for (std::size_t b = 0; b < B; ++b) {
    auto& s = bf.caches[b];
    probs[b] = seg_forward(c, P, sample_of(patch, b), &s, &logits[b]);
    vae_forward(c, P, s, eps ? eps->slice0(b) : std::span<const double>{});
    std::copy(s.mu.begin(), s.mu.end(), bf.out.mu.slice0(b).begin());
    std::copy(s.sigma.begin(), s.sigma.end(), bf.out.sigma.slice0(b).begin());
    recon[b] = s.recon;
  }
  bf.out.logits = stack(logits);
  bf.out.probs = stack(probs);
  bf.out.recon = stack(recon);
  return bf;
}

void conv_back(const Params& P, Grads& G, const std::string& base, const Tensor& x, const Tensor& dy, std::size_t k,
               std::size_t stride, Tensor* dx) {
  ops::conv3d_backward(x, P(base + ".w"), dy, k, stride, dx, G(base + ".w"), G(base + ".b"));
}

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.data.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < dst.numel(); ++i) dst.data[i] += src.data[i];
}

// Backpropagates one sample given dL/dlogits, dL/drecon, dL/dmu, dL/dsigma.
void sample_backward(const ModelConfig& c, const Params& P, Grads& G, const SampleCache& s, const Tensor& dlogits,
                     const Tensor& drecon, std::vector<double> dmu, std::vector<double> dsigma,
                     std::span<const double> eps) {
  const std::size_t L = c.n_levels;
  std::vector<Tensor> de(L);

  // Segmentation decoder.
  const Tensor& head_in = L > 1 ? s.d[0] : s.e[0];
  Tensor dcur;
  conv_back(P, G, "head", head_in, dlogits, 1, 1, &dcur);
  if (L == 1) add_into(de[0], dcur);
  for (std::size_t l = 0; l + 1 < L; ++l) {
    ops::relu_backward(s.d[l], dcur);
    Tensor dcat;
    conv_back(P, G, lvl("dec", l, ""), s.cat[l], dcur, 3, 1, &dcat);
    Tensor dup, dskip;
    ops::split_channels(dcat, s.up[l].shape[0], dup, dskip);
    add_into(de[l], dskip);
    const auto& below_shape = (l + 2 == L) ? s.e[L - 1].shape : s.d[l + 1].shape;
    dcur = ops::upsample2_backward(dup, below_shape);
    if (l + 2 == L) add_into(de[L - 1], dcur);
  }

  // VAE reconstruction head.
  const std::size_t cv = c.vae_channels();
  Tensor h0;
  if (L == 1) {
    h0 = Tensor({cv, c.bottleneck_extent(0), c.bottleneck_extent(1), c.bottleneck_extent(2)});
    h0.data.assign(s.h.begin(), s.h.end());
  }
  const Tensor& last = L > 1 ? s.vh[L - 2] : h0;
  Tensor dh;
  conv_back(P, G, "vae.out", last, drecon, 1, 1, &dh);
  for (std::size_t l = L - 1; l-- > 0;) {
    Tensor du = dh;
    Tensor dr;
    conv_back(P, G, lvl("vae.up", l, ".b"), s.vr[l], dh, 3, 1, &dr);
    ops::relu_backward(s.vr[l], dr);
    Tensor du2;
    conv_back(P, G, lvl("vae.up", l, ".a"), s.vu[l], dr, 3, 1, &du2);
    add_into(du, du2);
    std::vector<std::size_t> prev_shape =
        l == 0 ? std::vector<std::size_t>{cv, c.bottleneck_extent(0), c.bottleneck_extent(1), c.bottleneck_extent(2)}
               : s.vh[l - 1].shape;
    dh = ops::upsample2_backward(du, prev_shape);
  }
  std::vector<double> dhvec(dh.data.begin(), dh.data.end());
  for (std::size_t i = 0; i < dhvec.size(); ++i)
    if (!(s.h[i] > 0.0)) dhvec[i] = 0.0;
  std::vector<double> dz(c.latent_dim);
  ops::dense_backward(s.z, P("vae.expand.w"), dhvec, dz, G("vae.expand.w"), G("vae.expand.b"));
  for (std::size_t i = 0; i < c.latent_dim; ++i) {
    dmu[i] += dz[i];
    if (!eps.empty()) dsigma[i] += dz[i] * eps[i];
  }
  std::vector<double> dsraw(c.latent_dim);
  for (std::size_t i = 0; i < c.latent_dim; ++i) dsraw[i] = dsigma[i] * ops::sigmoid(s.sraw[i]);
  std::vector<double> dflat(s.s.numel()), dflat2(s.s.numel());
  ops::dense_backward(s.s.data, P("vae.mu.w"), dmu, dflat, G("vae.mu.w"), G("vae.mu.b"));
  ops::dense_backward(s.s.data, P("vae.sigma.w"), dsraw, dflat2, G("vae.sigma.w"), G("vae.sigma.b"));
  Tensor ds(s.s.shape);
  for (std::size_t i = 0; i < ds.numel(); ++i) ds.data[i] = dflat[i] + dflat2[i];
  ops::relu_backward(s.s, ds);
  Tensor dsq;
  conv_back(P, G, "vae.squeeze", s.e[L - 1], ds, 3, 1, &dsq);
  add_into(de[L - 1], dsq);

  // Encoder, top-down.
  for (std::size_t l = L; l-- > 0;) {
    ops::relu_backward(s.e[l], de[l]);
    Tensor da;
    conv_back(P, G, lvl("enc", l, ".b"), s.a[l], de[l], 3, 1, &da);
    ops::relu_backward(s.a[l], da);
    if (l == 0) {
      conv_back(P, G, lvl("enc", l, ".a"), s.x, da, 3, 1, nullptr);
    } else {
      Tensor dprev;
      conv_back(P, G, lvl("enc", l, ".a"), s.e[l - 1], da, 3, 2, &dprev);
      add_into(de[l - 1], dprev);
    }
  }
}

}  // namespace

std::size_t ModelConfig::vae_flat_size() const {
  return vae_channels() * bottleneck_extent(0) * bottleneck_extent(1) * bottleneck_extent(2);
}

void ModelConfig::validate() const {
  if (in_channels < 1 || n_classes < 2 || base_filters < 1 || n_levels < 1 || latent_dim < 1)
    throw ShapeError("invalid model configuration");
  const std::size_t div = std::size_t{1} << (n_levels - 1);
  for (auto p : patch)
    if (p == 0 || p % div != 0)
      throw ShapeError("patch extent " + std::to_string(p) + " not divisible by " + std::to_string(div));
}

SegModel::SegModel(ModelConfig cfg) : cfg_(cfg), weights_(zero_weights(cfg)) {}

SegModel::SegModel(ModelConfig cfg, wire::WeightSet weights) : cfg_(cfg), weights_(zero_weights(cfg)) {
  set_weights(std::move(weights));
}

wire::WeightSet SegModel::zero_weights(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<wire::WeightEntry> entries;
  for (auto& p : param_specs(cfg)) {
    wire::WeightEntry e{p.name, p.shape, {}};
    e.data.assign(e.numel(), 0.0);
    entries.push_back(std::move(e));
  }
  return wire::WeightSet(std::move(entries));
}

SegModel SegModel::initialized(const ModelConfig& cfg, std::uint64_t seed) {
  SegModel m(cfg);
  Rng rng(seed);
  const auto specs = param_specs(cfg);
  // Draw in declaration order so the stream does not depend on name sorting.
  for (const auto& p : specs) {
    if (p.fan_in == 0) continue;
    const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : m.weights_.at(p.name).data) v = dist(rng);
  }
  return m;
}

void SegModel::set_weights(wire::WeightSet w) {
  if (!w.same_layout(weights_))
    throw wire::WireError(wire::WireErrc::InvariantViolation, "weight layout does not match model configuration");
  weights_ = std::move(w);
}

Tensor draw_latent_noise(std::size_t batch, std::size_t latent_dim, Rng& rng) {
  Tensor eps({batch, latent_dim});
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& v : eps.data) v = n01(rng);
  return eps;
}

ForwardOutput forward_with_noise(const SegModel& model, const Tensor& patch, const Tensor* eps) {
  return run_forward(model, patch, eps).out;
}

ForwardOutput forward(const SegModel& model, const Tensor& patch, Mode mode, Rng* rng) {
  if (mode == Mode::Eval) return forward_with_noise(model, patch, nullptr);
  if (!rng) throw std::invalid_argument("train-mode forward needs an rng");
  check_patch(model.config(), patch);
  const Tensor eps = draw_latent_noise(patch.shape[0], model.config().latent_dim, *rng);
  return forward_with_noise(model, patch, &eps);
}

Tensor segment_probs(const SegModel& model, const Tensor& volume) {
  const auto& c = model.config();
  if (volume.rank() != 4 || volume.shape[0] != c.in_channels)
    throw ShapeError("segment_probs expects [C,D,H,W], got " + shape_str(volume.shape));
  const std::size_t div = std::size_t{1} << (c.n_levels - 1);
  for (std::size_t a = 1; a < 4; ++a)
    if (volume.shape[a] % div != 0) throw ShapeError("extent not divisible by " + std::to_string(div));
  return seg_forward(c, Params{model.weights()}, volume, nullptr, nullptr);
}

LossBreakdown total_loss(const ForwardOutput& out, const Tensor& labels, const Tensor& input, const LossWeights& lw) {
  const Tensor onehot = one_hot(labels, out.probs.shape.at(1));
  return combine_losses(dice_loss(out.probs, onehot), ce_loss(out.probs, onehot), kl_loss(out.mu, out.sigma),
                        recon_loss(out.recon, input), lw);
}

GradientResult loss_and_gradient(const SegModel& model, const Tensor& patch, const Tensor& labels,
                                 const LossWeights& lw, const Tensor& eps) {
  const auto& c = model.config();
  BatchForward bf = run_forward(model, patch, &eps);
  const Tensor onehot = one_hot(labels, c.n_classes);
  if (onehot.shape != bf.out.probs.shape) throw ShapeError("labels do not match patch extent");

  GradientResult res{SegModel::zero_weights(c), {}};
  res.loss = combine_losses(dice_loss(bf.out.probs, onehot), ce_loss(bf.out.probs, onehot),
                            kl_loss(bf.out.mu, bf.out.sigma), recon_loss(bf.out.recon, patch), lw);

  Tensor dprobs = dice_loss_grad(bf.out.probs, onehot);
  const Tensor dce = ce_loss_grad(bf.out.probs, onehot);
  for (std::size_t i = 0; i < dprobs.numel(); ++i) dprobs.data[i] += dce.data[i];
  Tensor drecon = recon_loss_grad(bf.out.recon, patch);
  for (auto& v : drecon.data) v *= lw.w_recon;
  Tensor dmu, dsigma;
  kl_loss_grad(bf.out.mu, bf.out.sigma, dmu, dsigma);

  const Params P{model.weights()};
  Grads G{res.grads};
  for (std::size_t b = 0; b < patch.shape[0]; ++b) {
    const Tensor dlogits = ops::softmax_channels_backward(bf.caches[b].probs, sample_of(dprobs, b));
    std::vector<double> dm(dmu.slice0(b).begin(), dmu.slice0(b).end());
    std::vector<double> dsg(dsigma.slice0(b).begin(), dsigma.slice0(b).end());
    for (auto& v : dm) v *= lw.w_kl;
    for (auto& v : dsg) v *= lw.w_kl;
    sample_backward(c, P, G, bf.caches[b], dlogits, sample_of(drecon, b), std::move(dm), std::move(dsg),
                    eps.slice0(b));
  }
  return res;
}

GradientResult loss_and_gradient(const SegModel& model, const Tensor& patch, const Tensor& labels,
                                 const LossWeights& lw, Rng& rng) {
  check_patch(model.config(), patch);
  const Tensor eps = draw_latent_noise(patch.shape[0], model.config().latent_dim, rng);
  return loss_and_gradient(model, patch, labels, lw, eps);
}

wire::WeightSet backward(const SegModel& model, const Tensor& patch, const Tensor& labels, const LossWeights& lw,
                         Rng& rng) {
  return loss_and_gradient(model, patch, labels, lw, rng).grads;
}

}  // namespace fedring::ml
