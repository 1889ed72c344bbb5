#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "fedring/volume.hpp"

namespace fedring::data {

inline constexpr double kHuMin = -200.0;
inline constexpr double kHuMax = 250.0;

/// Trilinear intensities, nearest-neighbour labels, clamp-to-edge borders.
/// Output voxel i samples input position i * target / spacing on each axis.
[[nodiscard]] Volume resample_isotropic(const Volume& v, double target_mm = 1.0);

/// Clamp to [hu_min, hu_max] and map linearly onto [-1, 1].
[[nodiscard]] Volume clip_and_rescale(const Volume& v, double hu_min = kHuMin, double hu_max = kHuMax);

struct PatchSpec {
  std::array<std::size_t, 3> size{16, 16, 16};  // px, py, pz
  double fg_fraction = 0.5;
};

/// Patch voxels are ordered [z][y][x] like the source volume.
struct Patch {
  std::vector<double> intensities;
  std::vector<std::uint8_t> labels;
  std::array<std::size_t, 3> center{};
  bool foreground = false;
};

struct PatchSample {
  std::vector<Patch> patches;
  /// Set when foreground patches were requested but the volume has no labelled voxel.
  bool no_foreground_voxels = false;
};

/// Crop of `size` centred on `center`; outside voxels read -1 intensity, label 0.
Patch extract_patch(const Volume& v, const std::array<std::size_t, 3>& size, const std::array<std::size_t, 3>& center);

/// Each patch is foreground-centred with probability fg_fraction; centres are
/// drawn uniformly from the voxels of the chosen kind.
PatchSample sample_patches(const Volume& v, const PatchSpec& spec, std::size_t n, std::mt19937_64& rng);

}  // namespace fedring::data
