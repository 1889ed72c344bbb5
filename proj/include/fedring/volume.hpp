#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fedring::data {

enum class VolumeErrc {
  EmptyVolume,
  DegenerateRange,
  BadFormat,
  InvalidLabel,
};

std::string_view to_string(VolumeErrc e);

class VolumeError : public std::runtime_error {
 public:
  VolumeError(VolumeErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  VolumeErrc code() const noexcept { return code_; }

 private:
  VolumeErrc code_;
};

inline constexpr std::uint8_t kMaxLabel = 2;

/// 3D scalar grid with per-axis spacing in millimetres and optional labels.
/// Voxel (x, y, z) lives at index (z * ny + y) * nx + x.
struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};  // nx, ny, nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<double> intensities;
  std::vector<std::uint8_t> labels;  // empty when unlabeled

  std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
  bool has_labels() const { return !labels.empty(); }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const { return (z * dims[1] + y) * dims[0] + x; }

  /// Throws VolumeError on inconsistent sizes, non-positive spacing or labels > 2.
  void validate() const;

  bool operator==(const Volume&) const = default;
};

// `.vol` layout: "FVOL" | 3 x i32 dims | 3 x f64 spacing | u8 has_labels | f64 intensities | u8 labels
std::vector<std::uint8_t> encode_volume(const Volume& v);
Volume decode_volume(std::span<const std::uint8_t> bytes);

void save_volume(const std::string& path, const Volume& v);
Volume load_volume(const std::string& path);

/// `.vol` files directly inside `dir`, sorted by name.
std::vector<std::string> list_volumes(const std::string& dir);

}  // namespace fedring::data
