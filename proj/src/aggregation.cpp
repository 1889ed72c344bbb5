#include "fedring/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace fedring::agg {

std::string_view to_string(AggErrc e) {
  switch (e) {
    case AggErrc::ShapeMismatch: return "ShapeMismatch";
    case AggErrc::QuorumNotMet: return "QuorumNotMet";
    case AggErrc::ZeroSampleCount: return "ZeroSampleCount";
    case AggErrc::NonFiniteWeight: return "NonFiniteWeight";
  }
  return "?";
}

bool check_quorum(std::size_t n_submitted, const AggregationPolicy& policy) {
  return n_submitted >= policy.min_clients;
}

namespace {

// Neumaier summation of exact products (fma recovers the product's rounding error).
struct CompensatedSum {
  double sum = 0.0;
  double comp = 0.0;

  void add(double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  void add_product(double a, double b) {
    const double p = a * b;
    add(p);
    add(std::fma(a, b, -p));
  }
  double value() const { return sum + comp; }
};

}  // namespace

wire::WeightSet aggregate(std::span<const wire::WeightSet> submissions, const AggregationPolicy& policy) {
  if (policy.min_clients < 1) throw std::invalid_argument("min_clients must be >= 1");
  if (submissions.empty() || !check_quorum(submissions.size(), policy))
    throw AggregationError(AggErrc::QuorumNotMet, "QuorumNotMet: " + std::to_string(submissions.size()) +
                                                      " submissions, need " + std::to_string(policy.min_clients));
  const auto& first = submissions.front();
  for (const auto& s : submissions.subspan(1)) {
    if (!s.same_layout(first)) throw AggregationError(AggErrc::ShapeMismatch, "ShapeMismatch: submission layouts differ");
  }

  std::uint64_t total = 0;
  for (const auto& s : submissions) total += s.sample_count();

  std::vector<double> coeff(submissions.size());
  if (policy.mode == Mode::SampleWeighted) {
    for (std::size_t i = 0; i < submissions.size(); ++i) {
      if (submissions[i].sample_count() == 0)
        throw AggregationError(AggErrc::ZeroSampleCount, "ZeroSampleCount: submission " + std::to_string(i));
      coeff[i] = static_cast<double>(submissions[i].sample_count()) / static_cast<double>(total);
    }
  } else {
    std::fill(coeff.begin(), coeff.end(), 1.0 / static_cast<double>(submissions.size()));
  }

  std::vector<wire::WeightEntry> out = first.entries();
  for (std::size_t e = 0; e < out.size(); ++e) {
    auto& dst = out[e].data;
    for (std::size_t j = 0; j < dst.size(); ++j) {
      CompensatedSum acc;
      double lo = submissions[0].entries()[e].data[j];
      double hi = lo;
      for (std::size_t i = 0; i < submissions.size(); ++i) {
        const double v = submissions[i].entries()[e].data[j];
        if (!std::isfinite(v))
          throw AggregationError(AggErrc::NonFiniteWeight, "NonFiniteWeight: entry " + out[e].name);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        acc.add_product(coeff[i], v);
      }
      dst[j] = std::clamp(acc.value(), lo, hi);
    }
  }
  return wire::WeightSet(std::move(out), total);
}

}  // namespace fedring::agg
