#include "fedring/client.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <thread>

#include "fedring/evaluate.hpp"

namespace fedring::client {

using wire::Envelope;
using wire::MsgType;

void ClientConfig::validate() const {
  if (epochs_per_round < 1) throw std::invalid_argument("epochs_per_round must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (patches_per_volume < 1) throw std::invalid_argument("patches_per_volume must be at least 1");
  if (local_validation_split < 0.0 || local_validation_split >= 1.0)
    throw std::invalid_argument("local_validation_split must be in [0, 1)");
  if (lr_min > lr_max) throw std::invalid_argument("lr_min exceeds lr_max");
  if (max_retries < 1) throw std::invalid_argument("max_retries must be at least 1");
  model.validate();
  const auto& p = patch_spec.size;
  if (model.patch != std::array<std::size_t, 3>{p[2], p[1], p[0]})
    throw std::invalid_argument("model.patch must equal patch_spec.size (as D, H, W)");
}

LocalData split_local_data(std::vector<data::Volume> vols, double val_fraction, std::uint64_t seed) {
  ml::Rng rng(seed);
  std::shuffle(vols.begin(), vols.end(), rng);
  std::size_t n_val = static_cast<std::size_t>(std::ceil(static_cast<double>(vols.size()) * val_fraction));
  if (vols.size() > 0) n_val = std::min(n_val, vols.size() - 1);
  LocalData out;
  const auto cut = vols.end() - static_cast<std::ptrdiff_t>(n_val);
  out.train.assign(std::make_move_iterator(vols.begin()), std::make_move_iterator(cut));
  out.val.assign(std::make_move_iterator(cut), std::make_move_iterator(vols.end()));
  return out;
}

std::size_t steps_per_epoch(const ClientConfig& cfg, std::size_t n_train) {
  return (n_train * cfg.patches_per_volume + cfg.batch_size - 1) / cfg.batch_size;
}

std::vector<EpochStats> train_local_epochs(ml::SegModel& model, const std::vector<data::Volume>& train,
                                           std::size_t n_epochs, ml::OptimizerState& opt, const ClientConfig& cfg,
                                           ml::Rng& rng) {
  if (train.empty()) throw std::invalid_argument("no training volumes");
  const auto& ps = cfg.patch_spec.size;
  const std::size_t voxels = ps[0] * ps[1] * ps[2];
  const std::size_t C = model.config().in_channels;
  std::vector<EpochStats> out;

  for (std::size_t epoch = 0; epoch < n_epochs; ++epoch) {
    std::vector<data::Patch> patches;
    for (const auto& v : train) {
      auto s = data::sample_patches(v, cfg.patch_spec, cfg.patches_per_volume, rng);
      for (auto& p : s.patches) patches.push_back(std::move(p));
    }
    std::shuffle(patches.begin(), patches.end(), rng);

    EpochStats st;
    st.lr = ml::cosine_lr(opt.step, opt);
    std::size_t steps = 0;
    for (std::size_t b0 = 0; b0 < patches.size(); b0 += cfg.batch_size) {
      const std::size_t B = std::min(cfg.batch_size, patches.size() - b0);
      ml::Tensor x({B, C, ps[2], ps[1], ps[0]});
      ml::Tensor y({B, ps[2], ps[1], ps[0]});
      for (std::size_t b = 0; b < B; ++b) {
        const auto& p = patches[b0 + b];
        for (std::size_t c = 0; c < C; ++c)
          std::copy(p.intensities.begin(), p.intensities.end(), x.data.begin() + static_cast<std::ptrdiff_t>((b * C + c) * voxels));
        std::copy(p.labels.begin(), p.labels.end(), y.data.begin() + static_cast<std::ptrdiff_t>(b * voxels));
      }
      auto res = ml::loss_and_gradient(model, x, y, cfg.loss_weights, rng);
      if (!std::isfinite(res.loss.total))
        throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps));
      ml::adam_step(opt, model.mutable_weights(), res.grads);
      st.total += res.loss.total;
      st.dice += res.loss.dice;
      st.ce += res.loss.ce;
      st.kl += res.loss.kl;
      st.recon += res.loss.recon;
      ++steps;
    }
    const double n = static_cast<double>(std::max<std::size_t>(steps, 1));
    st.total /= n;
    st.dice /= n;
    st.ce /= n;
    st.kl /= n;
    st.recon /= n;
    out.push_back(st);
  }
  return out;
}

Validator dice_validator(std::vector<data::Volume> val, data::PatchSpec window) {
  const auto classes = eval::present_classes(val);
  return [val = std::move(val), classes, window](const ml::SegModel& m) {
    return eval::mean_dice(m, val, classes, window);
  };
}

ClientTrainer::ClientTrainer(ClientConfig cfg, LocalData data, transport::Channel& channel, Validator validator)
    : cfg_(std::move(cfg)),
      data_(std::move(data)),
      channel_(channel),
      validator_(std::move(validator)),
      model_(cfg_.model),
      rng_(cfg_.seed) {
  cfg_.validate();
  if (data_.train.empty()) throw std::invalid_argument("client has no training volumes");
  if (!validator_ && !data_.val.empty()) validator_ = dice_validator(data_.val, cfg_.inference_window);
  opt_.lr_max = cfg_.lr_max;
  opt_.lr_min = cfg_.lr_min;
  best_weights_ = model_.weights();
  if (!cfg_.out_dir.empty()) std::filesystem::create_directories(cfg_.out_dir);
}

void ClientTrainer::log_line(const std::string& json_line) {
  if (cfg_.out_dir.empty()) return;
  std::ofstream(cfg_.out_dir + "/metrics.jsonl", std::ios::app) << json_line << '\n';
}

void ClientTrainer::abort(ClientErrc code, const std::string& msg) {
  if (!cfg_.out_dir.empty()) {
    wire::save_checkpoint(cfg_.out_dir + "/local_last.flw", model_.weights());
    wire::save_checkpoint(cfg_.out_dir + "/local_best.flw", best_weights_);
  }
  throw ClientError(code, cfg_.credential.client_id + ": " + msg);
}

Envelope ClientTrainer::send(const Envelope& req) {
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      return channel_.request(req);
    } catch (const transport::ConnectionLost& e) {
      if (attempt + 1 >= cfg_.max_retries) abort(ClientErrc::ConnectionLost, e.what());
      std::this_thread::sleep_for(cfg_.retry_base * (1LL << attempt));
    } catch (const wire::WireError& e) {
      abort(ClientErrc::Protocol, std::string("malformed reply: ") + e.what());
    }
  }
}

ClientTrainer::Status ClientTrainer::step() {
  if (finished_) return Status::Finished;

  if (token_.empty()) {
    const auto r = send({MsgType::LoginRequest, {}, 0, wire::encode_credential(cfg_.credential)});
    if (r.msg_type != MsgType::LoginAccept) abort(ClientErrc::AuthFailure, "login rejected");
    token_ = r.token;
    total_rounds_ = server::decode_login_accept(r.payload).total_rounds;
    opt_.total_steps = std::max<std::uint64_t>(
        1, std::uint64_t{total_rounds_} * cfg_.epochs_per_round * steps_per_epoch(cfg_, data_.train.size()));
    return Status::Working;
  }

  const auto r = send({MsgType::ModelPull, token_, 0, {}});
  if (r.msg_type == MsgType::TrainingFinished) {
    finished_ = true;
    if (!cfg_.out_dir.empty()) wire::save_checkpoint(cfg_.out_dir + "/local_last.flw", model_.weights());
    return Status::Finished;
  }
  if (r.msg_type == MsgType::Error && server::decode_error(r.payload).code == server::ErrorCode::AuthFailure)
    abort(ClientErrc::AuthFailure, "server no longer accepts our token");
  if (r.msg_type != MsgType::ModelPayload) abort(ClientErrc::Protocol, "unexpected reply to ModelPull");
  if (pushed_round_ == r.round_index) return Status::Waiting;

  ++pulls_;
  wire::WeightSet global = wire::deserialize_weights(r.payload);
  if (!global.same_layout(model_.weights())) abort(ClientErrc::ShapeMismatch, "global model layout differs from local config");
  last_pulled_ = global;
  model_.set_weights(std::move(global));
  log_line(nlohmann::json{{"event", "pull"}, {"round", r.round_index}}.dump());
  train_round(r.round_index);

  wire::WeightSet out = model_.weights();
  out.set_sample_count(data_.train.size());
  const auto ack = send({MsgType::ModelPush, token_, r.round_index, wire::serialize_weights(out)});
  ++pushes_;
  log_line(nlohmann::json{{"event", "push"}, {"round", r.round_index}, {"reply", wire::to_string(ack.msg_type)}}.dump());
  switch (ack.msg_type) {
    case MsgType::AckSubmission:
    case MsgType::RoundComplete:  // late for that round; the next pull picks up the new global
      pushed_round_ = r.round_index;
      break;
    case MsgType::TrainingFinished:
      finished_ = true;
      return Status::Finished;
    case MsgType::Error: {
      const auto err = server::decode_error(ack.payload);
      if (err.code == server::ErrorCode::DuplicateSubmission) {
        pushed_round_ = r.round_index;
        break;
      }
      abort(err.code == server::ErrorCode::ShapeMismatch ? ClientErrc::ShapeMismatch
            : err.code == server::ErrorCode::AuthFailure ? ClientErrc::AuthFailure
                                                          : ClientErrc::Protocol,
            "push refused: " + err.message);
    }
    default:
      abort(ClientErrc::Protocol, "unexpected reply to ModelPush");
  }
  return Status::Working;
}

void ClientTrainer::train_round(std::uint32_t round) {
  // Adam state and the step counter carry over between rounds, so the cosine
  // schedule spans the whole session.
  const auto stats = train_local_epochs(model_, data_.train, cfg_.epochs_per_round, opt_, cfg_, rng_);
  for (std::size_t e = 0; e < stats.size(); ++e) {
    const auto& s = stats[e];
    log_line(nlohmann::json{{"round", round},
                            {"epoch", epochs_run_ + e},
                            {"loss_total", s.total},
                            {"loss_dice", s.dice},
                            {"loss_ce", s.ce},
                            {"loss_kl", s.kl},
                            {"loss_recon", s.recon},
                            {"lr", s.lr}}
                 .dump());
  }
  epochs_run_ += stats.size();
  epoch_history_.insert(epoch_history_.end(), stats.begin(), stats.end());

  if (!validator_) {
    best_weights_ = model_.weights();
    best_round_ = round;
    return;
  }
  const double score = validator_(model_);
  validation_history_.push_back(score);
  log_line(nlohmann::json{{"event", "validation"}, {"round", round}, {"dice", score}}.dump());
  if (!best_score_ || score > *best_score_) {
    best_score_ = score;
    best_round_ = round;
    best_weights_ = model_.weights();
    if (!cfg_.out_dir.empty()) wire::save_checkpoint(cfg_.out_dir + "/local_best.flw", best_weights_);
  }
}

ClientResult run_client(const ClientConfig& cfg) {
  std::vector<data::Volume> vols;
  for (const auto& path : data::list_volumes(cfg.data_dir)) vols.push_back(data::load_volume(path));
  if (vols.empty()) throw std::runtime_error("no .vol files in " + cfg.data_dir);
  for (const auto& v : vols)
    if (!v.has_labels()) throw std::runtime_error("training volumes need labels");

  transport::TcpChannel channel(cfg.server);
  ClientTrainer trainer(cfg, split_local_data(std::move(vols), cfg.local_validation_split, cfg.seed), channel);
  while (true) {
    const auto status = trainer.step();
    if (status == ClientTrainer::Status::Finished) break;
    if (status == ClientTrainer::Status::Waiting) std::this_thread::sleep_for(cfg.poll_interval);
  }
  if (!cfg.out_dir.empty()) wire::save_checkpoint(cfg.out_dir + "/local_best.flw", trainer.local_best());
  return {trainer.model().weights(), trainer.local_best(), trainer.pulls(), trainer.pushes(), trainer.epochs_run()};
}

}  // namespace fedring::client
