#include "fedring/evaluate.hpp"

#include <algorithm>

namespace fedring::eval {

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, std::uint8_t class_id) {
  if (pred.size() != truth.size()) throw std::invalid_argument("dice_score: size mismatch");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == class_id, b = truth[i] == class_id;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

namespace {

std::vector<std::size_t> window_starts(std::size_t extent, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> out{0};
  while (out.back() + window < extent) out.push_back(std::min(out.back() + stride, extent - window));
  return out;
}

}  // namespace

data::Volume predict_volume(const ml::SegModel& model, const data::Volume& v, std::array<std::size_t, 3> window,
                            std::array<std::size_t, 3> stride) {
  v.validate();
  const auto& cfg = model.config();
  const std::size_t m = std::size_t{1} << (cfg.n_levels - 1);
  const std::size_t K = cfg.n_classes;

  std::array<std::size_t, 3> win{}, padded{};
  for (int a = 0; a < 3; ++a) {
    const auto round_up = [m](std::size_t n) { return (std::max<std::size_t>(n, 1) + m - 1) / m * m; };
    win[a] = std::min(round_up(window[a]), round_up(v.dims[a]));
    padded[a] = std::max(v.dims[a], win[a]);
    stride[a] = std::clamp<std::size_t>(stride[a], 1, win[a]);
  }
  const std::size_t nx = padded[0], ny = padded[1], nz = padded[2];
  const std::size_t n_vox = nx * ny * nz;

  std::vector<double> acc(K * n_vox, 0.0);
  std::vector<std::uint32_t> hits(n_vox, 0);
  ml::Tensor patch({cfg.in_channels, win[2], win[1], win[0]});
  const std::size_t plane = win[0] * win[1] * win[2];

  for (std::size_t z0 : window_starts(nz, win[2], stride[2]))
    for (std::size_t y0 : window_starts(ny, win[1], stride[1]))
      for (std::size_t x0 : window_starts(nx, win[0], stride[0])) {
        std::size_t o = 0;
        for (std::size_t z = 0; z < win[2]; ++z)
          for (std::size_t y = 0; y < win[1]; ++y)
            for (std::size_t x = 0; x < win[0]; ++x, ++o) {
              const std::size_t sx = x0 + x, sy = y0 + y, sz = z0 + z;
              const bool inside = sx < v.dims[0] && sy < v.dims[1] && sz < v.dims[2];
              const double val = inside ? v.intensities[v.index(sx, sy, sz)] : -1.0;
              for (std::size_t c = 0; c < cfg.in_channels; ++c) patch.data[c * plane + o] = val;
            }
        const ml::Tensor probs = ml::segment_probs(model, patch);
        o = 0;
        for (std::size_t z = 0; z < win[2]; ++z)
          for (std::size_t y = 0; y < win[1]; ++y)
            for (std::size_t x = 0; x < win[0]; ++x, ++o) {
              const std::size_t g = ((z0 + z) * ny + (y0 + y)) * nx + (x0 + x);
              for (std::size_t k = 0; k < K; ++k) acc[k * n_vox + g] += probs.data[k * plane + o];
              ++hits[g];
            }
      }

  data::Volume out = v;
  out.labels.assign(v.size(), 0);
  for (std::size_t z = 0; z < v.dims[2]; ++z)
    for (std::size_t y = 0; y < v.dims[1]; ++y)
      for (std::size_t x = 0; x < v.dims[0]; ++x) {
        const std::size_t g = (z * ny + y) * nx + x;
        std::size_t best = 0;
        double best_p = acc[g] / hits[g];
        for (std::size_t k = 1; k < K; ++k) {
          const double p = acc[k * n_vox + g] / hits[g];
          if (p > best_p) {
            best_p = p;
            best = k;
          }
        }
        out.labels[v.index(x, y, z)] = static_cast<std::uint8_t>(best);
      }
  return out;
}

data::Volume predict_volume(const ml::SegModel& model, const data::Volume& v, const data::PatchSpec& window) {
  std::array<std::size_t, 3> stride{};
  for (int a = 0; a < 3; ++a) stride[a] = std::max<std::size_t>(1, window.size[a] / 2);
  return predict_volume(model, v, window.size, stride);
}

std::set<std::uint8_t> present_classes(const std::vector<data::Volume>& vols) {
  std::set<std::uint8_t> out;
  for (const auto& v : vols)
    for (auto l : v.labels)
      if (l > 0) out.insert(l);
  return out;
}

double mean_dice(const ml::SegModel& model, const std::vector<data::Volume>& vols, const std::set<std::uint8_t>& classes,
                 const data::PatchSpec& window) {
  if (vols.empty() || classes.empty()) return 0.0;
  std::vector<double> per_class(classes.size(), 0.0);
  for (const auto& v : vols) {
    const auto pred = predict_volume(model, v, window);
    std::size_t i = 0;
    for (auto c : classes) per_class[i++] += dice_score(pred.labels, v.labels, c);
  }
  double total = 0.0;
  for (double s : per_class) total += s / static_cast<double>(vols.size());
  return total / static_cast<double>(classes.size());
}

server::ValidationHook dice_validation_hook(std::string data_dir, ml::ModelConfig cfg, data::PatchSpec window) {
  return [data_dir = std::move(data_dir), cfg, window](const wire::WeightSet& global, std::uint32_t) {
    std::vector<data::Volume> vols;
    try {
      for (const auto& path : data::list_volumes(data_dir)) vols.push_back(data::load_volume(path));
    } catch (const std::exception& e) {
      throw server::HookDataUnreadable(e.what());
    }
    if (vols.empty()) throw server::HookDataUnreadable("no .vol files in " + data_dir);
    for (const auto& v : vols)
      if (!v.has_labels()) throw server::HookDataUnreadable("unlabelled volume in " + data_dir);
    const ml::SegModel model(cfg, global);
    return mean_dice(model, vols, present_classes(vols), window);
  };
}

}  // namespace fedring::eval
