#include "fedring/volume.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "fedring/bytes.hpp"

namespace fedring::data {

std::string_view to_string(VolumeErrc e) {
  switch (e) {
    case VolumeErrc::EmptyVolume: return "EmptyVolume";
    case VolumeErrc::DegenerateRange: return "DegenerateRange";
    case VolumeErrc::BadFormat: return "BadFormat";
    case VolumeErrc::InvalidLabel: return "InvalidLabel";
  }
  return "?";
}

namespace {

constexpr std::uint8_t kMagic[4] = {'F', 'V', 'O', 'L'};

[[noreturn]] void fail(VolumeErrc code, const std::string& msg) {
  throw VolumeError(code, std::string(to_string(code)) + ": " + msg);
}

}  // namespace

void Volume::validate() const {
  if (size() == 0) fail(VolumeErrc::EmptyVolume, "volume has a zero dimension");
  for (double s : spacing)
    if (!(s > 0.0)) fail(VolumeErrc::BadFormat, "spacing must be positive");
  if (intensities.size() != size()) fail(VolumeErrc::BadFormat, "intensity count does not match dims");
  if (has_labels()) {
    if (labels.size() != size()) fail(VolumeErrc::BadFormat, "label count does not match dims");
    if (std::any_of(labels.begin(), labels.end(), [](std::uint8_t l) { return l > kMaxLabel; }))
      fail(VolumeErrc::InvalidLabel, "labels must be in {0, 1, 2}");
  }
}

std::vector<std::uint8_t> encode_volume(const Volume& v) {
  v.validate();
  ByteWriter w;
  w.raw(std::span<const std::uint8_t>(kMagic));
  for (auto d : v.dims) w.i32(static_cast<std::int32_t>(d));
  for (auto s : v.spacing) w.f64(s);
  w.u8(v.has_labels() ? 1 : 0);
  for (double x : v.intensities) w.f64(x);
  w.raw(v.labels);
  return w.take();
}

Volume decode_volume(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.take(4);
  if (!r.ok() || !std::equal(magic.begin(), magic.end(), kMagic)) fail(VolumeErrc::BadFormat, "missing FVOL magic");
  Volume v;
  for (auto& d : v.dims) {
    const auto n = r.i32();
    if (n <= 0) fail(VolumeErrc::BadFormat, "non-positive dimension");
    d = static_cast<std::size_t>(n);
  }
  for (auto& s : v.spacing) s = r.f64();
  const std::uint8_t has_labels = r.u8();
  if (!r.ok() || has_labels > 1) fail(VolumeErrc::BadFormat, "header cut short");
  const std::size_t n = v.size();
  if (r.remaining() != n * 8 + (has_labels ? n : 0)) fail(VolumeErrc::BadFormat, "body size does not match dims");
  v.intensities.resize(n);
  for (auto& x : v.intensities) x = r.f64();
  if (has_labels) {
    auto l = r.take(n);
    v.labels.assign(l.begin(), l.end());
  }
  v.validate();
  return v;
}

void save_volume(const std::string& path, const Volume& v) {
  const auto bytes = encode_volume(v);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write to " + path);
}

Volume load_volume(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_volume(bytes);
}

std::vector<std::string> list_volumes(const std::string& dir) {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".vol") out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace fedring::data
