#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fedring/aggregation.hpp"

using namespace fedring::agg;
using fedring::wire::WeightSet;

namespace {

using fedring::wire::DoubleBuffer;

WeightSet vec(std::vector<double> v, std::uint64_t n = 1) {
  const auto sz = static_cast<std::uint32_t>(v.size());
  return WeightSet({{"w", {sz}, DoubleBuffer(v.begin(), v.end())}}, n);
}

AggErrc agg_error(std::vector<WeightSet> subs, AggregationPolicy p) {
  try {
    aggregate(subs, p);
  } catch (const AggregationError& e) {
    return e.code();
  }
  FAIL("expected AggregationError");
  return AggErrc::QuorumNotMet;
}

}  // namespace

TEST_CASE("check_quorum") {
  CHECK_FALSE(check_quorum(1, {Mode::SampleWeighted, 2}));
  CHECK(check_quorum(2, {Mode::SampleWeighted, 2}));
  CHECK_FALSE(check_quorum(0, {Mode::SampleWeighted, 1}));
}

TEST_CASE("single submission is returned unchanged") {
  const auto w = vec({1.5, -2.25, 3.0}, 7);
  for (auto mode : {Mode::UniformMean, Mode::SampleWeighted}) {
    const auto out = aggregate(std::vector{w}, {mode, 1});
    CHECK(out.at("w").data == w.at("w").data);
    CHECK(out.sample_count() == 7);
  }
}

TEST_CASE("uniform mean of two submissions") {
  const auto out = aggregate(std::vector{vec({1, 2}), vec({3, 4})}, {Mode::UniformMean, 2});
  CHECK(out.at("w").data == DoubleBuffer{2, 3});
}

TEST_CASE("sample-weighted with the two training-set sizes") {
  const auto out = aggregate(std::vector{vec({0}, 252), vec({1}, 286)}, {Mode::SampleWeighted, 2});
  const double oracle = (252.0 * 0 + 286.0 * 1) / (252.0 + 286.0);
  CHECK(out.at("w").data[0] == doctest::Approx(oracle).epsilon(1e-15));
  CHECK(out.at("w").data[0] == doctest::Approx(0.531598).epsilon(1e-6));
  CHECK(out.sample_count() == 538);
}

TEST_CASE("aggregation errors") {
  CHECK(agg_error({vec({1, 2}), vec({1, 2, 3})}, {Mode::UniformMean, 1}) == AggErrc::ShapeMismatch);
  CHECK(agg_error({vec({1})}, {Mode::UniformMean, 2}) == AggErrc::QuorumNotMet);
  CHECK(agg_error({}, {Mode::UniformMean, 1}) == AggErrc::QuorumNotMet);
  CHECK(agg_error({vec({1}, 0), vec({2}, 3)}, {Mode::SampleWeighted, 1}) == AggErrc::ZeroSampleCount);
  const WeightSet renamed({{"v", {1}, {1.0}}});
  CHECK(agg_error({vec({1}), renamed}, {Mode::UniformMean, 1}) == AggErrc::ShapeMismatch);
}

TEST_CASE("aggregation properties on random submissions") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-10, 10);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng() % 5;
    const std::size_t n = 1 + rng() % 20;
    std::vector<WeightSet> subs;
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<double> v(n);
      for (auto& x : v) x = u(rng);
      subs.push_back(vec(v, 1 + rng() % 500));
    }
    for (auto mode : {Mode::UniformMean, Mode::SampleWeighted}) {
      const auto out = aggregate(subs, {mode, 1});
      auto shuffled = subs;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      const auto out2 = aggregate(shuffled, {mode, 1});
      for (std::size_t j = 0; j < n; ++j) {
        double lo = 1e300, hi = -1e300;
        for (const auto& s : subs) {
          lo = std::min(lo, s.at("w").data[j]);
          hi = std::max(hi, s.at("w").data[j]);
        }
        CHECK(out.at("w").data[j] >= lo);
        CHECK(out.at("w").data[j] <= hi);
        CHECK(std::abs(out.at("w").data[j] - out2.at("w").data[j]) <= 1e-12);
      }
    }
  }
}

TEST_CASE("replicas aggregate to themselves within one ulp") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(16);
    for (auto& x : v) x = u(rng);
    const std::size_t k = 1 + rng() % 7;
    std::vector<WeightSet> subs(k, vec(v, 1 + rng() % 50));
    for (auto mode : {Mode::UniformMean, Mode::SampleWeighted}) {
      const auto out = aggregate(subs, {mode, 1});
      for (std::size_t j = 0; j < v.size(); ++j) {
        const double ulp = std::nextafter(std::abs(v[j]), INFINITY) - std::abs(v[j]);
        CHECK(std::abs(out.at("w").data[j] - v[j]) <= ulp);
      }
    }
  }
}

TEST_CASE("equal counts make sample-weighted identical to uniform") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng() % 4;
    const std::uint64_t count = 1 + rng() % 300;
    std::vector<WeightSet> subs;
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<double> v(8);
      for (auto& x : v) x = u(rng);
      subs.push_back(vec(v, count));
    }
    CHECK(aggregate(subs, {Mode::SampleWeighted, 1}).at("w").data ==
          aggregate(subs, {Mode::UniformMean, 1}).at("w").data);
  }
}

TEST_CASE("uniform mean is linear under common scaling") {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const double alpha = u(rng);
    std::vector<WeightSet> subs, scaled;
    for (int i = 0; i < 3; ++i) {
      std::vector<double> v(6), s(6);
      for (std::size_t j = 0; j < v.size(); ++j) {
        v[j] = u(rng);
        s[j] = alpha * v[j];
      }
      subs.push_back(vec(v));
      scaled.push_back(vec(s));
    }
    const auto a = aggregate(subs, {Mode::UniformMean, 1}).at("w").data;
    const auto b = aggregate(scaled, {Mode::UniformMean, 1}).at("w").data;
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(b[j] == doctest::Approx(alpha * a[j]).epsilon(1e-12));
  }
}
