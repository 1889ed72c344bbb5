#include "fedring/server.hpp"

#include <openssl/crypto.h>
#include <openssl/rand.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "fedring/bytes.hpp"

namespace fedring::server {

using wire::Bytes;
using wire::Envelope;
using wire::MsgType;

std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::AuthFailure: return "AuthFailure";
    case ErrorCode::DuplicateSubmission: return "DuplicateSubmission";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadRequest: return "BadRequest";
  }
  return "?";
}

void ServerConfig::validate() const {
  if (min_clients < 1) throw std::invalid_argument("min_clients must be at least 1");
  if (min_clients > max_clients) throw std::invalid_argument("min_clients exceeds max_clients");
  if (total_rounds < 1) throw std::invalid_argument("total_rounds must be at least 1");
  if (tls_cert_path.empty() != tls_key_path.empty())
    throw std::invalid_argument("tls_cert_path and tls_key_path go together");
  for (const auto& c : accepted_credentials)
    if (!c.valid()) throw std::invalid_argument("credential for '" + c.client_id + "' is too weak");
}

TokenSource secure_tokens() {
  return [] {
    Bytes t(32);
    if (RAND_bytes(t.data(), static_cast<int>(t.size())) != 1) throw std::runtime_error("RAND_bytes failed");
    return t;
  };
}

namespace {

double now_ms() {
  using namespace std::chrono;
  return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

bool same_secret(const Bytes& a, const Bytes& b) {
  return a.size() == b.size() && CRYPTO_memcmp(a.data(), b.data(), a.size()) == 0;
}

}  // namespace

Server::Server(ServerConfig cfg, wire::WeightSet initial_global, TokenSource tokens, ValidationHook hook,
               std::string out_dir)
    : cfg_(std::move(cfg)), tokens_(std::move(tokens)), hook_(std::move(hook)), out_dir_(std::move(out_dir)) {
  cfg_.validate();
  cfg_.aggregation.min_clients = static_cast<std::uint32_t>(cfg_.min_clients);
  state_.global = std::move(initial_global);
  round_started_ms_ = now_ms();
  if (!out_dir_.empty()) {
    std::filesystem::create_directories(out_dir_);
    wire::save_checkpoint(out_dir_ + "/global.flw", state_.global);
  }
}

Envelope Server::handle(const Envelope& req) {
  std::lock_guard lock(mu_);
  switch (req.msg_type) {
    case MsgType::LoginRequest: return handle_login(req);
    case MsgType::ModelPull: return handle_pull(req);
    case MsgType::ModelPush: return handle_push(req);
    default: break;
  }
  const Bytes token = req.token.empty() ? Bytes{0} : req.token;
  return error(token, ErrorCode::BadRequest, "unexpected " + std::string(wire::to_string(req.msg_type)));
}

Bytes Server::handle_frame(std::span<const std::uint8_t> frame) {
  return wire::encode_envelope(handle(wire::decode_envelope(frame)));
}

Envelope Server::error(const Bytes& token, ErrorCode code, const std::string& msg) const {
  return {MsgType::Error, token, state_.round_index, encode_error({code, msg})};
}

const ClientSession* Server::session_for(const Bytes& token) const {
  if (token.empty()) return nullptr;
  for (const auto& [id, s] : sessions_)
    if (same_secret(s.token, token)) return &s;
  return nullptr;
}

Envelope Server::handle_login(const Envelope& req) {
  const auto reject = [](RejectReason r) { return Envelope{MsgType::LoginReject, {}, 0, {static_cast<std::uint8_t>(r)}}; };
  wire::Credential cred;
  try {
    cred = wire::decode_credential(req.payload);
  } catch (const wire::WireError&) {
    return reject(RejectReason::BadCredential);
  }
  bool known = false;
  for (const auto& c : cfg_.accepted_credentials)
    if (c.client_id == cred.client_id && same_secret(c.secret, cred.secret)) known = true;
  if (!known) return reject(RejectReason::BadCredential);

  // A returning client replaces its old session instead of taking a new slot.
  const bool relogin = sessions_.count(cred.client_id) > 0;
  if (!relogin && sessions_.size() >= cfg_.max_clients) return reject(RejectReason::ServerFull);

  ClientSession s{cred.client_id, {}, -1};
  do {
    s.token = tokens_();
  } while (s.token.empty() || session_for(s.token) != nullptr);
  sessions_[cred.client_id] = s;
  return {MsgType::LoginAccept, s.token, 0, encode_login_accept({cfg_.total_rounds, state_.round_index})};
}

Envelope Server::handle_pull(const Envelope& req) {
  const ClientSession* s = session_for(req.token);
  if (!s) return error(req.token, ErrorCode::AuthFailure, "unknown token");
  sessions_[s->client_id].last_seen_round = state_.round_index;
  if (state_.phase == Phase::Done) return {MsgType::TrainingFinished, req.token, state_.round_index, {}};
  return {MsgType::ModelPayload, req.token, state_.round_index, wire::serialize_weights(state_.global)};
}

Envelope Server::handle_push(const Envelope& req) {
  const ClientSession* s = session_for(req.token);
  if (!s) return error(req.token, ErrorCode::AuthFailure, "unknown token");
  if (state_.phase == Phase::Done) return {MsgType::TrainingFinished, req.token, state_.round_index, {}};
  if (req.round_index != state_.round_index) return {MsgType::RoundComplete, req.token, state_.round_index, {}};
  if (state_.submissions.count(s->client_id))
    return error(req.token, ErrorCode::DuplicateSubmission, "already submitted for round " + std::to_string(state_.round_index));

  wire::WeightSet w;
  try {
    w = wire::deserialize_weights(req.payload);
  } catch (const wire::WireError& e) {
    return error(req.token, ErrorCode::BadRequest, e.what());
  }
  if (!w.same_layout(state_.global))
    return error(req.token, ErrorCode::ShapeMismatch, "submission layout differs from the global model");
  if (cfg_.aggregation.mode == agg::Mode::SampleWeighted && w.sample_count() == 0)
    return error(req.token, ErrorCode::BadRequest, "sample_count must be positive");

  const std::uint32_t submitted_round = state_.round_index;
  state_.submissions.emplace(s->client_id, std::move(w));
  if (agg::check_quorum(state_.submissions.size(), cfg_.aggregation)) finish_round();
  return {MsgType::AckSubmission, req.token, submitted_round, {}};
}

void Server::finish_round() {
  state_.phase = Phase::Aggregating;
  std::vector<wire::WeightSet> subs;
  subs.reserve(state_.submissions.size());
  for (auto& [id, w] : state_.submissions) subs.push_back(std::move(w));

  RoundRecord rec;
  rec.n_submissions = subs.size();
  state_.global = agg::aggregate(subs, cfg_.aggregation);
  state_.submissions.clear();
  ++state_.round_index;
  rec.round_index = state_.round_index;
  state_.phase = state_.round_index >= cfg_.total_rounds ? Phase::Done : Phase::Collecting;

  rec.validation_score = run_validation_hook(state_.global, state_.round_index);
  const double t = now_ms();
  rec.wall_ms = t - round_started_ms_;
  round_started_ms_ = t;

  if (!out_dir_.empty()) {
    wire::save_checkpoint(out_dir_ + "/global.flw", state_.global);
    if (best_round_ == state_.round_index) wire::save_checkpoint(out_dir_ + "/best.flw", state_.global);
    nlohmann::json line{{"round_index", rec.round_index}, {"n_submissions", rec.n_submissions}, {"wall_ms", rec.wall_ms}};
    if (rec.validation_score) line["validation_score"] = *rec.validation_score;
    std::ofstream(out_dir_ + "/rounds.log", std::ios::app) << line.dump() << '\n';
  }
  history_.push_back(rec);
}

std::optional<double> Server::run_validation_hook(const wire::WeightSet& global, std::uint32_t round_index) {
  if (!hook_) return std::nullopt;
  double score = 0.0;
  try {
    score = hook_(global, round_index);
  } catch (const HookDataUnreadable& e) {
    std::cerr << "validation hook skipped for round " << round_index << ": " << e.what() << '\n';
    return std::nullopt;
  }
  if (!best_score_ || score > *best_score_) {
    best_score_ = score;
    best_round_ = round_index;
  }
  return score;
}

std::uint32_t Server::round_index() const {
  std::lock_guard lock(mu_);
  return state_.round_index;
}

Phase Server::phase() const {
  std::lock_guard lock(mu_);
  return state_.phase;
}

wire::WeightSet Server::global() const {
  std::lock_guard lock(mu_);
  return state_.global;
}

std::vector<RoundRecord> Server::history() const {
  std::lock_guard lock(mu_);
  return history_;
}

std::size_t Server::live_sessions() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

std::optional<std::uint32_t> Server::best_round() const {
  std::lock_guard lock(mu_);
  return best_round_;
}

Bytes encode_login_accept(const LoginAcceptInfo& info) {
  ByteWriter w;
  w.u32(info.total_rounds);
  w.u32(info.current_round);
  return w.take();
}

LoginAcceptInfo decode_login_accept(std::span<const std::uint8_t> payload) {
  ByteReader r(payload);
  LoginAcceptInfo info{r.u32(), r.u32()};
  if (!r.ok() || r.remaining() != 0) throw wire::WireError(wire::WireErrc::LengthMismatch, "bad LoginAccept payload");
  return info;
}

Bytes encode_error(const ErrorInfo& e) {
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(e.code));
  w.raw(e.message);
  return w.take();
}

ErrorInfo decode_error(std::span<const std::uint8_t> payload) {
  if (payload.empty()) throw wire::WireError(wire::WireErrc::TruncatedFrame, "empty Error payload");
  return {static_cast<ErrorCode>(payload[0]), std::string(payload.begin() + 1, payload.end())};
}

}  // namespace fedring::server
