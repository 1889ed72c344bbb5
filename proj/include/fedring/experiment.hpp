#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fedring/aggregation.hpp"
#include "fedring/client.hpp"
#include "fedring/model.hpp"
#include "fedring/phantom.hpp"
#include "fedring/transport.hpp"

namespace fedring::sim {

struct ExperimentPlan {
  PhantomSpec c1;
  PhantomSpec c2;
  std::array<double, 3> split{0.6, 0.2, 0.2};  // train / val / test
  std::uint32_t rounds = 10;
  std::size_t epochs_per_round = 2;
  ml::ModelConfig model;
  std::size_t batch_size = 4;
  std::size_t patches_per_volume = 4;
  data::PatchSpec patch_spec{{16, 16, 16}, 0.5};
  data::PatchSpec inference_window{{48, 48, 48}, 0.5};
  double lr_max = 3e-3;
  double lr_min = 3e-4;
  ml::LossWeights loss_weights;
  agg::AggregationPolicy aggregation;
  double target_spacing_mm = 1.0;
  double hu_min = -200.0;
  double hu_max = 250.0;
  /// Score each new global on the pooled validation splits and report FL_global_best.
  bool server_validation = false;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Desk-scale defaults: 20 volumes per client, 16^3 patches, 10 rounds of 2 epochs.
ExperimentPlan default_plan(std::uint64_t seed);

struct MetricsRow {
  std::string model;
  double c1_pancreas = 0.0;
  double c2_pancreas = 0.0;
  double c2_tumor = 0.0;
};

/// Dice per model and test set. The two average columns are always derived
/// from the cells: pancreas average weights the two pancreas columns by test
/// set size, and average is the mean of pancreas average and tumor.
class MetricsTable {
 public:
  MetricsTable(std::size_t c1_test_size, std::size_t c2_test_size) : n1_(c1_test_size), n2_(c2_test_size) {}

  void add(MetricsRow row) { rows_.push_back(std::move(row)); }
  const std::vector<MetricsRow>& rows() const { return rows_; }
  const MetricsRow& row(const std::string& model) const;

  double pancreas_average(const MetricsRow& r) const;
  double average(const MetricsRow& r) const;
  /// Column means over all rows, in the order c1_pancreas, c2_pancreas, c2_tumor, pancreas_average, average.
  std::array<double, 5> column_means() const;

  /// One header line, one line per model, then an "Average" line. Fixed 6 decimals.
  std::string to_csv() const;

 private:
  std::size_t n1_, n2_;
  std::vector<MetricsRow> rows_;
};

struct ExperimentResult {
  MetricsTable table{0, 0};
  wire::WeightSet fl_global;
  /// Frames exchanged by each FL client, in order.
  std::vector<std::vector<transport::TraceEntry>> client_traces;
  std::vector<server::RoundRecord> rounds;
};

/// Generates and preprocesses both datasets, trains the two standalone
/// baselines, runs two-client FL over in-memory channels, and evaluates all
/// five models on both test sets. Writes table1.csv, rounds.log, metrics logs
/// and every checkpoint under `out_dir` (skipped when empty).
ExperimentResult run_experiment(const ExperimentPlan& plan, const std::string& out_dir);

/// Phantom generation plus resampling and intensity normalization.
std::vector<data::Volume> prepare_dataset(const PhantomSpec& spec, const ExperimentPlan& plan);

}  // namespace fedring::sim
