#pragma once

#include <span>
#include <stdexcept>
#include <string>

#include "fedring/wire.hpp"

namespace fedring::agg {

enum class AggErrc { ShapeMismatch, QuorumNotMet, ZeroSampleCount, NonFiniteWeight };

std::string_view to_string(AggErrc e);

class AggregationError : public std::runtime_error {
 public:
  AggregationError(AggErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  AggErrc code() const noexcept { return code_; }

 private:
  AggErrc code_;
};

enum class Mode { UniformMean, SampleWeighted };

struct AggregationPolicy {
  Mode mode = Mode::SampleWeighted;
  std::uint32_t min_clients = 1;
};

bool check_quorum(std::size_t n_submitted, const AggregationPolicy& policy);

/// Element-wise (weighted) mean of client weight sets.
///
/// Each output element is sum_i c_i * w_i with c_i = 1/k (UniformMean) or
/// n_i / sum(n) (SampleWeighted), reduced in submission order with a
/// compensated accumulator. Results are clamped into the per-element range of
/// the inputs so rounding can never leave the convex hull.
wire::WeightSet aggregate(std::span<const wire::WeightSet> submissions, const AggregationPolicy& policy);

}  // namespace fedring::agg
