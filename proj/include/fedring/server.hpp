#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedring/aggregation.hpp"
#include "fedring/wire.hpp"

namespace fedring::server {

enum class RejectReason : std::uint8_t { BadCredential = 1, ServerFull = 2 };

enum class ErrorCode : std::uint8_t {
  AuthFailure = 1,
  DuplicateSubmission = 2,
  ShapeMismatch = 3,
  BadRequest = 4,
};

std::string_view to_string(ErrorCode c);

struct ServerConfig {
  std::uint16_t listen_port = 7950;
  std::string tls_cert_path;  // TLS is on when both paths are set
  std::string tls_key_path;
  std::size_t max_clients = 2;
  std::size_t min_clients = 2;
  std::uint32_t total_rounds = 10;
  std::vector<wire::Credential> accepted_credentials;
  agg::AggregationPolicy aggregation;

  bool tls_enabled() const { return !tls_cert_path.empty() && !tls_key_path.empty(); }
  /// Throws std::invalid_argument.
  void validate() const;
};

enum class Phase { Collecting, Aggregating, Done };

struct RoundState {
  std::uint32_t round_index = 0;
  wire::WeightSet global;
  std::map<std::string, wire::WeightSet> submissions;  // keyed by client_id
  Phase phase = Phase::Collecting;
};

struct ClientSession {
  std::string client_id;
  wire::Bytes token;
  std::int64_t last_seen_round = -1;
};

/// Thrown by a validation hook whose dataset cannot be read. The server logs it
/// and carries on with the round.
class HookDataUnreadable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Scores a freshly aggregated global model; `round_index` is the round the
/// model opens. Mean foreground Dice on held-out data in practice.
using ValidationHook = std::function<double(const wire::WeightSet& global, std::uint32_t round_index)>;

using TokenSource = std::function<wire::Bytes()>;
/// 32 bytes from the OpenSSL CSPRNG.
TokenSource secure_tokens();

struct RoundRecord {
  std::uint32_t round_index = 0;  // index after the aggregation
  std::size_t n_submissions = 0;
  double wall_ms = 0.0;
  std::optional<double> validation_score;
};

/// Round-based aggregation server. All requests go through `handle`, which
/// serializes state changes behind one mutex; transports stay stateless.
class Server {
 public:
  /// `out_dir` receives global.flw, best.flw and rounds.log; empty disables file output.
  Server(ServerConfig cfg, wire::WeightSet initial_global, TokenSource tokens = secure_tokens(),
         ValidationHook hook = {}, std::string out_dir = {});

  wire::Envelope handle(const wire::Envelope& req);
  /// Decodes, handles and encodes. Malformed frames throw wire::WireError.
  wire::Bytes handle_frame(std::span<const std::uint8_t> frame);

  // Snapshots, safe to call while other threads hold sessions.
  std::uint32_t round_index() const;
  Phase phase() const;
  wire::WeightSet global() const;
  std::vector<RoundRecord> history() const;
  std::size_t live_sessions() const;
  std::optional<std::uint32_t> best_round() const;
  const ServerConfig& config() const { return cfg_; }

  /// Skipped (nullopt) when no hook is configured; HookDataUnreadable also yields nullopt.
  std::optional<double> run_validation_hook(const wire::WeightSet& global, std::uint32_t round_index);

 private:
  wire::Envelope handle_login(const wire::Envelope& req);
  wire::Envelope handle_pull(const wire::Envelope& req);
  wire::Envelope handle_push(const wire::Envelope& req);
  void finish_round();
  const ClientSession* session_for(const wire::Bytes& token) const;
  wire::Envelope error(const wire::Bytes& token, ErrorCode code, const std::string& msg) const;

  ServerConfig cfg_;
  TokenSource tokens_;
  ValidationHook hook_;
  std::string out_dir_;

  mutable std::mutex mu_;
  RoundState state_;
  std::map<std::string, ClientSession> sessions_;  // keyed by client_id
  std::vector<RoundRecord> history_;
  std::optional<double> best_score_;
  std::optional<std::uint32_t> best_round_;
  double round_started_ms_ = 0.0;
};

// Payload codecs shared with the client.
struct LoginAcceptInfo {
  std::uint32_t total_rounds = 0;
  std::uint32_t current_round = 0;
};
wire::Bytes encode_login_accept(const LoginAcceptInfo& info);
LoginAcceptInfo decode_login_accept(std::span<const std::uint8_t> payload);

struct ErrorInfo {
  ErrorCode code = ErrorCode::BadRequest;
  std::string message;
};
wire::Bytes encode_error(const ErrorInfo& e);
ErrorInfo decode_error(std::span<const std::uint8_t> payload);

}  // namespace fedring::server
