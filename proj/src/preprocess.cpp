#include "fedring/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace fedring::data {

namespace {

struct AxisSample {
  std::size_t i0, i1;  // bracketing indices
  double f;            // weight of i1
  std::size_t nearest;
};

std::vector<AxisSample> axis_samples(std::size_t n_in, double spacing, double target, std::size_t n_out) {
  std::vector<AxisSample> out(n_out);
  const double hi = static_cast<double>(n_in - 1);
  for (std::size_t o = 0; o < n_out; ++o) {
    const double x = std::clamp(static_cast<double>(o) * target / spacing, 0.0, hi);
    const double fl = std::floor(x);
    auto& s = out[o];
    s.i0 = static_cast<std::size_t>(fl);
    s.i1 = std::min(s.i0 + 1, n_in - 1);
    s.f = x - fl;
    s.nearest = static_cast<std::size_t>(std::floor(x + 0.5));
  }
  return out;
}

double lerp(double a, double b, double f) { return f == 0.0 ? a : a + f * (b - a); }

}  // namespace

Volume resample_isotropic(const Volume& v, double target_mm) {
  if (v.size() == 0) throw VolumeError(VolumeErrc::EmptyVolume, "EmptyVolume: nothing to resample");
  v.validate();
  if (!(target_mm > 0.0)) throw std::invalid_argument("target spacing must be positive");

  Volume out;
  std::array<std::vector<AxisSample>, 3> ax;
  for (int a = 0; a < 3; ++a) {
    const double extent = static_cast<double>(v.dims[a]) * v.spacing[a] / target_mm;
    out.dims[a] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(extent)));
    out.spacing[a] = target_mm;
    ax[a] = axis_samples(v.dims[a], v.spacing[a], target_mm, out.dims[a]);
  }
  out.intensities.resize(out.size());
  if (v.has_labels()) out.labels.resize(out.size());

  const auto at = [&](std::size_t x, std::size_t y, std::size_t z) { return v.intensities[v.index(x, y, z)]; };
  for (std::size_t z = 0; z < out.dims[2]; ++z) {
    const auto& sz = ax[2][z];
    for (std::size_t y = 0; y < out.dims[1]; ++y) {
      const auto& sy = ax[1][y];
      for (std::size_t x = 0; x < out.dims[0]; ++x) {
        const auto& sx = ax[0][x];
        const double c00 = lerp(at(sx.i0, sy.i0, sz.i0), at(sx.i1, sy.i0, sz.i0), sx.f);
        const double c10 = lerp(at(sx.i0, sy.i1, sz.i0), at(sx.i1, sy.i1, sz.i0), sx.f);
        const double c01 = lerp(at(sx.i0, sy.i0, sz.i1), at(sx.i1, sy.i0, sz.i1), sx.f);
        const double c11 = lerp(at(sx.i0, sy.i1, sz.i1), at(sx.i1, sy.i1, sz.i1), sx.f);
        const std::size_t o = out.index(x, y, z);
        out.intensities[o] = lerp(lerp(c00, c10, sy.f), lerp(c01, c11, sy.f), sz.f);
        if (v.has_labels()) out.labels[o] = v.labels[v.index(sx.nearest, sy.nearest, sz.nearest)];
      }
    }
  }
  return out;
}

Volume clip_and_rescale(const Volume& v, double hu_min, double hu_max) {
  if (!(hu_min < hu_max)) throw VolumeError(VolumeErrc::DegenerateRange, "DegenerateRange: hu_min must be below hu_max");
  Volume out = v;
  const double span = hu_max - hu_min;
  for (auto& x : out.intensities) x = 2.0 * (std::clamp(x, hu_min, hu_max) - hu_min) / span - 1.0;
  return out;
}

Patch extract_patch(const Volume& v, const std::array<std::size_t, 3>& size, const std::array<std::size_t, 3>& center) {
  Patch p;
  p.center = center;
  p.foreground = v.has_labels() && v.labels[v.index(center[0], center[1], center[2])] > 0;
  p.intensities.assign(size[0] * size[1] * size[2], -1.0);
  p.labels.assign(p.intensities.size(), 0);
  std::array<std::ptrdiff_t, 3> origin{};
  for (int a = 0; a < 3; ++a)
    origin[a] = static_cast<std::ptrdiff_t>(center[a]) - static_cast<std::ptrdiff_t>(size[a] / 2);

  std::size_t o = 0;
  for (std::size_t z = 0; z < size[2]; ++z) {
    const auto sz = origin[2] + static_cast<std::ptrdiff_t>(z);
    for (std::size_t y = 0; y < size[1]; ++y) {
      const auto sy = origin[1] + static_cast<std::ptrdiff_t>(y);
      for (std::size_t x = 0; x < size[0]; ++x, ++o) {
        const auto sx = origin[0] + static_cast<std::ptrdiff_t>(x);
        if (sx < 0 || sy < 0 || sz < 0 || sx >= static_cast<std::ptrdiff_t>(v.dims[0]) ||
            sy >= static_cast<std::ptrdiff_t>(v.dims[1]) || sz >= static_cast<std::ptrdiff_t>(v.dims[2]))
          continue;
        const std::size_t i = v.index(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy), static_cast<std::size_t>(sz));
        p.intensities[o] = v.intensities[i];
        if (v.has_labels()) p.labels[o] = v.labels[i];
      }
    }
  }
  return p;
}

PatchSample sample_patches(const Volume& v, const PatchSpec& spec, std::size_t n, std::mt19937_64& rng) {
  v.validate();
  if (!v.has_labels()) throw VolumeError(VolumeErrc::BadFormat, "BadFormat: patch sampling needs labels");
  if (spec.fg_fraction < 0.0 || spec.fg_fraction > 1.0) throw std::invalid_argument("fg_fraction must be in [0, 1]");

  std::vector<std::size_t> fg, bg;
  for (std::size_t i = 0; i < v.labels.size(); ++i) (v.labels[i] > 0 ? fg : bg).push_back(i);

  PatchSample out;
  out.patches.reserve(n);
  std::bernoulli_distribution want_fg(spec.fg_fraction);
  for (std::size_t k = 0; k < n; ++k) {
    bool use_fg = want_fg(rng);
    if (use_fg && fg.empty()) {
      out.no_foreground_voxels = true;
      use_fg = false;
    }
    if (!use_fg && bg.empty()) use_fg = true;
    const auto& pool = use_fg ? fg : bg;
    const std::size_t i = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    const std::size_t nx = v.dims[0], ny = v.dims[1];
    out.patches.push_back(extract_patch(v, spec.size, {i % nx, (i / nx) % ny, i / (nx * ny)}));
  }
  return out;
}

}  // namespace fedring::data
