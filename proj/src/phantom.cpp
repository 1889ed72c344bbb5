#include "fedring/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace fedring::sim {

namespace {

using Rng = std::mt19937_64;
using Vec3 = std::array<double, 3>;

double draw(const Range& r, Rng& rng) {
  return r.lo == r.hi ? r.lo : std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

// Snaps a physical position onto the nearest voxel centre.
Vec3 snap(const Vec3& p, const PhantomSpec& s) {
  Vec3 out{};
  for (int a = 0; a < 3; ++a) {
    const double i = std::clamp(std::round(p[a] / s.spacing_mm[a]), 0.0, double(s.dims[a] - 1));
    out[a] = i * s.spacing_mm[a];
  }
  return out;
}

double ellipsoid_norm(const Vec3& p, const Vec3& c, const Vec3& r) {
  double q = 0.0;
  for (int a = 0; a < 3; ++a) q += ((p[a] - c[a]) / r[a]) * ((p[a] - c[a]) / r[a]);
  return q;
}

}  // namespace

std::vector<data::Volume> generate_phantoms(const PhantomSpec& spec) {
  for (int a = 0; a < 3; ++a)
    if (spec.dims[a] == 0 || !(spec.spacing_mm[a] > 0)) throw std::invalid_argument("phantom dims/spacing must be positive");
  Rng rng(spec.seed);
  Vec3 mid{};
  for (int a = 0; a < 3; ++a) {
    mid[a] = 0.5 * double(spec.dims[a] - 1) * spec.spacing_mm[a];
  }

  std::vector<data::Volume> out;
  for (std::size_t n = 0; n < spec.n_volumes; ++n) {
    Vec3 oc{}, orad{};
    for (int a = 0; a < 3; ++a) {
      oc[a] = mid[a] + draw(spec.organ.center_offset[a], rng);
      orad[a] = draw(spec.organ.radii[a], rng);
    }
    oc = snap(oc, spec);
    const double organ_hu = spec.organ.mean_hu + draw({-spec.organ.mean_jitter_hu, spec.organ.mean_jitter_hu}, rng);

    // Tumor: ||d / r_organ|| + r_t / min(r_organ) <= 1 keeps the whole sphere inside.
    std::optional<std::pair<Vec3, double>> tumor;
    if (spec.tumor) {
      const double rt = draw(spec.tumor->radius, rng);
      const double rmin = *std::min_element(orad.begin(), orad.end());
      if (rt >= rmin) throw std::invalid_argument("tumor radius does not fit inside the organ");
      const double budget = 1.0 - rt / rmin;
      for (int attempt = 0;; ++attempt) {
        if (attempt == 1000) throw std::runtime_error("cannot place tumor inside organ");
        Vec3 dir{};
        std::normal_distribution<double> g(0.0, 1.0);
        double len = 0.0;
        for (auto& d : dir) {
          d = g(rng);
          len += d * d;
        }
        const double scale = 0.6 * budget * std::cbrt(std::uniform_real_distribution<double>(0, 1)(rng)) / std::sqrt(len);
        Vec3 tc{};
        for (int a = 0; a < 3; ++a) tc[a] = oc[a] + dir[a] * scale * orad[a];
        tc = snap(tc, spec);
        if (std::sqrt(ellipsoid_norm(tc, oc, orad)) + rt / rmin <= 1.0) {
          tumor = std::make_pair(tc, rt);
          break;
        }
      }
    }

    std::vector<std::pair<Vec3, bool>> lobes;  // centre, fatty
    for (std::size_t k = 0; k < spec.organ.lobules; ++k) {
      Vec3 c{};
      do {
        for (int a = 0; a < 3; ++a) c[a] = oc[a] + draw({-orad[a], orad[a]}, rng);
      } while (ellipsoid_norm(c, oc, orad) > 1.0);
      lobes.emplace_back(c, std::uniform_real_distribution<double>(0, 1)(rng) < spec.organ.fat_fraction);
    }

    data::Volume v;
    v.dims = spec.dims;
    v.spacing = spec.spacing_mm;
    v.intensities.resize(v.size());
    v.labels.assign(v.size(), 0);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t z = 0; z < spec.dims[2]; ++z)
      for (std::size_t y = 0; y < spec.dims[1]; ++y)
        for (std::size_t x = 0; x < spec.dims[0]; ++x) {
          const Vec3 p{double(x) * spec.spacing_mm[0], double(y) * spec.spacing_mm[1], double(z) * spec.spacing_mm[2]};
          const std::size_t i = v.index(x, y, z);
          double hu = spec.background_hu;
          std::uint8_t label = 0;
          if (ellipsoid_norm(p, oc, orad) <= 1.0) {
            label = 1;
            hu = organ_hu;
            if (!lobes.empty()) {
              std::size_t nearest = 0;
              double best = 1e300;
              for (std::size_t k = 0; k < lobes.size(); ++k) {
                double q = 0.0;
                for (int a = 0; a < 3; ++a) q += (p[a] - lobes[k].first[a]) * (p[a] - lobes[k].first[a]);
                if (q < best) best = q, nearest = k;
              }
              if (lobes[nearest].second) hu = spec.organ.fat_hu;
            }
            hu += spec.organ.texture_std_hu * noise(rng);
            if (tumor && ellipsoid_norm(p, tumor->first, {tumor->second, tumor->second, tumor->second}) <= 1.0) {
              label = 2;
              hu = organ_hu + spec.tumor->offset_hu + spec.organ.texture_std_hu * noise(rng);
            }
          }
          v.intensities[i] = hu + spec.noise_std_hu * noise(rng);
          v.labels[i] = label;
        }

    const bool has_organ = std::count(v.labels.begin(), v.labels.end(), 1) > 0;
    const bool has_tumor = std::count(v.labels.begin(), v.labels.end(), 2) > 0;
    if (!has_organ || (spec.tumor && !has_tumor)) throw std::runtime_error("phantom lost its organ or tumor voxels");
    out.push_back(std::move(v));
  }
  return out;
}

PhantomSpec client1_preset(std::uint64_t seed) {
  PhantomSpec s;
  s.dims = {48, 48, 48};
  s.spacing_mm = {1.0, 1.0, 1.0};
  s.organ.center_offset = {Range{-6, 6}, Range{-6, 6}, Range{-6, 6}};
  s.organ.radii = {Range{10, 14}, Range{6, 9}, Range{8, 12}};
  s.organ.mean_hu = 25.0;
  s.organ.mean_jitter_hu = 2.0;
  s.organ.texture_std_hu = 2.0;
  s.noise_std_hu = 5.0;
  s.seed = seed;
  return s;
}

PhantomSpec client2_preset(std::uint64_t seed) {
  PhantomSpec s;
  s.dims = {48, 48, 10};
  s.spacing_mm = {0.68, 0.68, 5.0};
  s.organ.center_offset = {Range{-3, 3}, Range{-3, 3}, Range{-6, 6}};
  s.organ.radii = {Range{9, 12}, Range{8, 10}, Range{11, 16}};
  s.organ.mean_hu = 100.0;
  s.organ.mean_jitter_hu = 10.0;
  s.organ.texture_std_hu = 5.0;
  s.organ.lobules = 40;
  s.organ.fat_fraction = 0.35;
  s.organ.fat_hu = -130.0;
  s.noise_std_hu = 5.0;
  s.tumor = TumorSpec{{4, 7}, -160.0};
  s.seed = seed;
  return s;
}

}  // namespace fedring::sim
