#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedring/model.hpp"
#include "fedring/optimizer.hpp"
#include "fedring/preprocess.hpp"
#include "fedring/transport.hpp"

namespace fedring::client {

struct ClientConfig {
  transport::Endpoint server;
  wire::Credential credential;
  std::string data_dir;
  std::size_t epochs_per_round = 10;
  std::size_t batch_size = 2;
  /// Patches drawn from every training volume in one epoch.
  std::size_t patches_per_volume = 4;
  data::PatchSpec patch_spec;
  /// Sliding-window size for local validation; stride is half of it.
  data::PatchSpec inference_window{{32, 32, 32}, 0.5};
  ml::LossWeights loss_weights;
  std::uint64_t seed = 0;
  double local_validation_split = 0.2;
  ml::ModelConfig model;
  double lr_max = 1e-4;
  double lr_min = 1e-5;
  /// local_best.flw, local_last.flw and metrics.jsonl go here; empty keeps everything in memory.
  std::string out_dir;
  std::size_t max_retries = 5;
  std::chrono::milliseconds retry_base{100};
  std::chrono::milliseconds poll_interval{200};

  /// Throws std::invalid_argument.
  void validate() const;
};

enum class ClientErrc { ConnectionLost, AuthFailure, ShapeMismatch, Protocol };

class ClientError : public std::runtime_error {
 public:
  ClientError(ClientErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ClientErrc code() const noexcept { return code_; }

 private:
  ClientErrc code_;
};

struct LocalData {
  std::vector<data::Volume> train;
  std::vector<data::Volume> val;
};

/// Seeded shuffle, then the last ceil(n * val_fraction) volumes become the
/// validation split (at least one volume always stays in training).
LocalData split_local_data(std::vector<data::Volume> vols, double val_fraction, std::uint64_t seed);

struct EpochStats {
  double total = 0, dice = 0, ce = 0, kl = 0, recon = 0;
  double lr = 0;  // rate of the epoch's first step
};

/// Optimizer steps in one epoch over `n_train` volumes.
std::size_t steps_per_epoch(const ClientConfig& cfg, std::size_t n_train);

/// Each epoch samples patches_per_volume balanced patches from every volume,
/// shuffles them, and takes one Adam step per batch. Returns per-epoch means.
/// A non-finite loss throws std::runtime_error naming the epoch and step.
std::vector<EpochStats> train_local_epochs(ml::SegModel& model, const std::vector<data::Volume>& train,
                                           std::size_t n_epochs, ml::OptimizerState& opt, const ClientConfig& cfg,
                                           ml::Rng& rng);

/// Scores a local model; higher is better.
using Validator = std::function<double(const ml::SegModel&)>;

/// Foreground-mean Dice over the classes present in `val`.
Validator dice_validator(std::vector<data::Volume> val, data::PatchSpec window);

/// Client protocol as a step machine, so a single thread can interleave
/// several clients. One step is a login, or a pull followed (for a new round)
/// by local training and a push.
class ClientTrainer {
 public:
  enum class Status { Working, Waiting, Finished };

  ClientTrainer(ClientConfig cfg, LocalData data, transport::Channel& channel, Validator validator = {});

  Status step();
  bool finished() const { return finished_; }

  const ml::SegModel& model() const { return model_; }
  /// Weights with the best local validation score so far (latest if no validator).
  const wire::WeightSet& local_best() const { return best_weights_; }
  std::optional<double> best_score() const { return best_score_; }
  std::optional<std::uint32_t> best_round() const { return best_round_; }

  std::size_t pulls() const { return pulls_; }
  std::size_t pushes() const { return pushes_; }
  std::size_t epochs_run() const { return epochs_run_; }
  const std::vector<EpochStats>& epoch_history() const { return epoch_history_; }
  const std::vector<double>& validation_history() const { return validation_history_; }
  /// Weights as received by the most recent pull.
  const wire::WeightSet& last_pulled() const { return last_pulled_; }

 private:
  wire::Envelope send(const wire::Envelope& req);
  [[noreturn]] void abort(ClientErrc code, const std::string& msg);
  void log_line(const std::string& json_line);
  void train_round(std::uint32_t round);

  ClientConfig cfg_;
  LocalData data_;
  transport::Channel& channel_;
  Validator validator_;
  ml::SegModel model_;
  ml::OptimizerState opt_;
  ml::Rng rng_;

  wire::Bytes token_;
  std::uint32_t total_rounds_ = 0;
  std::optional<std::uint32_t> pushed_round_;
  bool finished_ = false;

  wire::WeightSet last_pulled_;
  wire::WeightSet best_weights_;
  std::optional<double> best_score_;
  std::optional<std::uint32_t> best_round_;
  std::size_t pulls_ = 0, pushes_ = 0, epochs_run_ = 0;
  std::vector<EpochStats> epoch_history_;
  std::vector<double> validation_history_;
};

struct ClientResult {
  wire::WeightSet final_weights;
  wire::WeightSet local_best;
  std::size_t pulls = 0, pushes = 0, epochs = 0;
};

/// Loads data_dir, connects over TCP and runs until TrainingFinished.
ClientResult run_client(const ClientConfig& cfg);

}  // namespace fedring::client
