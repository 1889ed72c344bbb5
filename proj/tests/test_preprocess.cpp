#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <set>
#include <vector>

#include "fedring/preprocess.hpp"

using namespace fedring::data;

namespace {

Volume make_volume(std::array<std::size_t, 3> dims, std::array<double, 3> spacing, bool labels = false) {
  Volume v;
  v.dims = dims;
  v.spacing = spacing;
  v.intensities.assign(v.size(), 0.0);
  if (labels) v.labels.assign(v.size(), 0);
  return v;
}

}  // namespace

TEST_CASE("constant volume resamples to a constant") {
  auto v = make_volume({5, 7, 3}, {0.68, 0.68, 5.0});
  std::fill(v.intensities.begin(), v.intensities.end(), 42.5);
  const auto out = resample_isotropic(v);
  CHECK(out.dims == std::array<std::size_t, 3>{3, 5, 15});
  CHECK(out.spacing == std::array<double, 3>{1.0, 1.0, 1.0});
  for (double x : out.intensities) CHECK(std::abs(x - 42.5) < 1e-9);
}

TEST_CASE("unit spacing is the identity") {
  std::mt19937_64 rng(3);
  auto v = make_volume({6, 5, 4}, {1, 1, 1}, true);
  for (auto& x : v.intensities) x = std::uniform_real_distribution<double>(-1000, 1000)(rng);
  for (auto& l : v.labels) l = static_cast<std::uint8_t>(rng() % 3);
  CHECK(resample_isotropic(v) == v);
}

TEST_CASE("z ramp at 2 mm reproduces half-integer values") {
  auto v = make_volume({1, 1, 5}, {1, 1, 2});
  for (std::size_t k = 0; k < 5; ++k) v.intensities[k] = static_cast<double>(k);
  const auto out = resample_isotropic(v);
  REQUIRE(out.dims[2] == 10);
  CHECK(std::abs(out.intensities[1] - 0.5) < 1e-9);
  for (std::size_t k = 0; k < 10; ++k) {
    const double expected = std::min(0.5 * static_cast<double>(k), 4.0);  // clamped past the last slice
    CHECK(std::abs(out.intensities[k] - expected) < 1e-9);
  }
}

TEST_CASE("trilinear is exact on 3D linear ramps") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> coef(-3, 3), sp(0.4, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    const std::array<std::size_t, 3> dims{3 + rng() % 6, 3 + rng() % 6, 3 + rng() % 6};
    const std::array<double, 3> spacing{sp(rng), sp(rng), sp(rng)};
    const double c0 = coef(rng), cx = coef(rng), cy = coef(rng), cz = coef(rng);
    auto v = make_volume(dims, spacing);
    for (std::size_t z = 0; z < dims[2]; ++z)
      for (std::size_t y = 0; y < dims[1]; ++y)
        for (std::size_t x = 0; x < dims[0]; ++x)
          v.intensities[v.index(x, y, z)] = c0 + cx * double(x) + cy * double(y) + cz * double(z);
    const auto out = resample_isotropic(v, 1.0);
    const auto pos = [&](std::size_t o, int a) {
      return std::min(double(o) / spacing[a], double(dims[a] - 1));
    };
    for (std::size_t z = 0; z < out.dims[2]; ++z)
      for (std::size_t y = 0; y < out.dims[1]; ++y)
        for (std::size_t x = 0; x < out.dims[0]; ++x) {
          const double expected = c0 + cx * pos(x, 0) + cy * pos(y, 1) + cz * pos(z, 2);
          CHECK(std::abs(out.intensities[out.index(x, y, z)] - expected) < 1e-9);
        }
  }
}

TEST_CASE("label resampling never invents labels") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> sp(0.5, 5.0);
  for (int trial = 0; trial < 100; ++trial) {
    auto v = make_volume({2 + rng() % 8, 2 + rng() % 8, 2 + rng() % 8}, {sp(rng), sp(rng), sp(rng)}, true);
    // Random non-empty subset of {0, 1, 2}.
    std::vector<std::uint8_t> allowed;
    const auto mask = 1 + rng() % 7;
    for (std::uint8_t c = 0; c < 3; ++c)
      if (mask & (1u << c)) allowed.push_back(c);
    for (auto& l : v.labels) l = allowed[rng() % allowed.size()];
    const std::set<std::uint8_t> in(v.labels.begin(), v.labels.end());
    const auto out = resample_isotropic(v, 1.0);
    for (auto l : out.labels) CHECK(in.count(l) == 1);
  }
}

TEST_CASE("resampling twice at the same target is idempotent") {
  std::mt19937_64 rng(5);
  auto v = make_volume({9, 9, 4}, {0.68, 0.68, 5.0}, true);
  for (auto& x : v.intensities) x = std::uniform_real_distribution<double>(-300, 300)(rng);
  const auto once = resample_isotropic(v);
  const auto twice = resample_isotropic(once);
  REQUIRE(twice.dims == once.dims);
  for (std::size_t i = 0; i < once.size(); ++i) CHECK(std::abs(once.intensities[i] - twice.intensities[i]) < 1e-9);
  CHECK(once.labels == twice.labels);
}

TEST_CASE("empty volume is rejected") {
  Volume v;
  CHECK_THROWS_AS((void)resample_isotropic(v), VolumeError);
}

TEST_CASE("clip and rescale anchors") {
  auto v = make_volume({5, 1, 1}, {1, 1, 1});
  v.intensities = {-200, 25, 250, 300, -1000};
  const auto out = clip_and_rescale(v);
  CHECK(out.intensities[0] == -1.0);
  CHECK(out.intensities[1] == 0.0);
  CHECK(out.intensities[2] == 1.0);
  CHECK(out.intensities[3] == 1.0);
  CHECK(out.intensities[4] == -1.0);
  CHECK_THROWS_AS((void)clip_and_rescale(v, 10, 10), VolumeError);
}

TEST_CASE("clip and rescale is monotone onto [-1, 1]") {
  std::mt19937_64 rng(23);
  auto v = make_volume({2000, 1, 1}, {1, 1, 1});
  for (auto& x : v.intensities) x = std::uniform_real_distribution<double>(-2000, 2000)(rng);
  std::sort(v.intensities.begin(), v.intensities.end());
  const auto out = clip_and_rescale(v);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out.intensities[i] >= -1.0);
    CHECK(out.intensities[i] <= 1.0);
    if (i > 0) CHECK(out.intensities[i] >= out.intensities[i - 1]);
  }
}

TEST_CASE("single labelled voxel centres every foreground patch") {
  auto v = make_volume({10, 10, 10}, {1, 1, 1}, true);
  v.labels[v.index(2, 7, 4)] = 1;
  std::mt19937_64 rng(1);
  const auto s = sample_patches(v, {{4, 4, 4}, 1.0}, 50, rng);
  CHECK_FALSE(s.no_foreground_voxels);
  for (const auto& p : s.patches) {
    CHECK(p.center == std::array<std::size_t, 3>{2, 7, 4});
    CHECK(p.foreground);
    CHECK(p.labels[(2 * 4 + 2) * 4 + 2] == 1);  // the centre voxel sits at size/2
  }
}

TEST_CASE("balanced sampling stays within the binomial band") {
  auto v = make_volume({12, 12, 12}, {1, 1, 1}, true);
  for (std::size_t z = 4; z < 8; ++z)
    for (std::size_t y = 4; y < 8; ++y)
      for (std::size_t x = 4; x < 8; ++x) v.labels[v.index(x, y, z)] = 1;
  std::mt19937_64 rng(99);
  const auto s = sample_patches(v, {{4, 4, 4}, 0.5}, 10000, rng);
  const auto fg = std::count_if(s.patches.begin(), s.patches.end(), [](const Patch& p) { return p.foreground; });
  CHECK(fg >= 4800);
  CHECK(fg <= 5200);
}

TEST_CASE("all-background volume raises the warning flag") {
  auto v = make_volume({8, 8, 8}, {1, 1, 1}, true);
  std::mt19937_64 rng(2);
  const auto s = sample_patches(v, {{4, 4, 4}, 0.5}, 10000, rng);
  CHECK(s.no_foreground_voxels);
  CHECK(s.patches.size() == 10000);
  CHECK(std::none_of(s.patches.begin(), s.patches.end(), [](const Patch& p) { return p.foreground; }));
}

TEST_CASE("patches pad outside the volume") {
  auto v = make_volume({3, 3, 3}, {1, 1, 1}, true);
  std::fill(v.intensities.begin(), v.intensities.end(), 0.25);
  std::fill(v.labels.begin(), v.labels.end(), 1);
  const auto p = extract_patch(v, {8, 8, 8}, {1, 1, 1});
  CHECK(std::count(p.intensities.begin(), p.intensities.end(), 0.25) == 27);
  CHECK(std::count(p.intensities.begin(), p.intensities.end(), -1.0) == 512 - 27);
  CHECK(std::count(p.labels.begin(), p.labels.end(), 1) == 27);
}

TEST_CASE("sampling is reproducible for a seed") {
  auto v = make_volume({10, 10, 10}, {1, 1, 1}, true);
  std::mt19937_64 init(4);
  for (auto& x : v.intensities) x = std::uniform_real_distribution<double>(-1, 1)(init);
  for (std::size_t i = 0; i < v.size(); i += 7) v.labels[i] = 1;
  std::mt19937_64 a(8), b(8);
  const auto sa = sample_patches(v, {{5, 5, 5}, 0.5}, 30, a);
  const auto sb = sample_patches(v, {{5, 5, 5}, 0.5}, 30, b);
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(sa.patches[i].intensities == sb.patches[i].intensities);
    CHECK(sa.patches[i].labels == sb.patches[i].labels);
  }
}

TEST_CASE("vol file round-trip and rejection") {
  auto v = make_volume({3, 2, 2}, {0.68, 0.68, 5.0}, true);
  for (std::size_t i = 0; i < v.size(); ++i) {
    v.intensities[i] = double(i) - 3.5;
    v.labels[i] = static_cast<std::uint8_t>(i % 3);
  }
  const auto bytes = encode_volume(v);
  CHECK(bytes.size() == 16 + 24 + 1 + 12 * 8 + 12);
  CHECK(decode_volume(bytes) == v);

  auto unlabeled = v;
  unlabeled.labels.clear();
  CHECK(decode_volume(encode_volume(unlabeled)) == unlabeled);

  auto cut = bytes;
  cut.pop_back();
  CHECK_THROWS_AS(decode_volume(cut), VolumeError);
  auto bad = bytes;
  bad.back() = 7;
  CHECK_THROWS_AS(decode_volume(bad), VolumeError);

  const auto path = (std::filesystem::temp_directory_path() / "fedring_test.vol").string();
  save_volume(path, v);
  CHECK(load_volume(path) == v);
  std::filesystem::remove(path);
}
