#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "fedring/volume.hpp"

namespace fedring::sim {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

/// Axis-aligned ellipsoid; all lengths in millimetres.
struct OrganSpec {
  std::array<Range, 3> center_offset{};  // from the volume centre
  std::array<Range, 3> radii{};
  double mean_hu = 0.0;
  double mean_jitter_hu = 0.0;  // per-volume shift of the mean
  double texture_std_hu = 0.0;
  /// Fatty lobulation: the organ is cut into `lobules` Voronoi cells and each
  /// cell turns to `fat_hu` with probability `fat_fraction`. Still labelled organ.
  std::size_t lobules = 0;
  double fat_fraction = 0.0;
  double fat_hu = -60.0;
};

/// Sphere placed strictly inside the organ.
struct TumorSpec {
  Range radius;  // mm
  double offset_hu = 0.0;  // relative to the organ mean
};

struct PhantomSpec {
  std::size_t n_volumes = 20;
  std::array<std::size_t, 3> dims{48, 48, 48};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  OrganSpec organ;
  std::optional<TumorSpec> tumor;
  double background_hu = 0.0;
  double noise_std_hu = 20.0;
  std::uint64_t seed = 0;
};

/// Labels 1 = organ, 2 = tumor. Every volume holds at least one organ voxel
/// and, when a tumor is specified, at least one tumor voxel.
std::vector<data::Volume> generate_phantoms(const PhantomSpec& spec);

/// Healthy homogeneous faint organ, isotropic 1 mm.
PhantomSpec client1_preset(std::uint64_t seed);
/// Bright lobulated organ with fat cells and a dark tumor, 0.68 x 0.68 x 5 mm.
PhantomSpec client2_preset(std::uint64_t seed);

}  // namespace fedring::sim
