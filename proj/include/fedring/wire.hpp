#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fedring::wire {

using Bytes = std::vector<std::uint8_t>;

/// Flat double storage. Buffers are always aligned to Eigen's packet boundary so
/// vectorized kernels take identical paths (and round identically) on every run.
using DoubleBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

enum class WireErrc {
  BadMagic,
  TruncatedFrame,
  UnknownMsgType,
  LengthMismatch,
  InvariantViolation,
  NonFiniteWeight,
};

std::string_view to_string(WireErrc e);

class WireError : public std::runtime_error {
 public:
  WireError(WireErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  WireErrc code() const noexcept { return code_; }

 private:
  WireErrc code_;
};

enum class MsgType : std::uint8_t {
  LoginRequest = 0,
  LoginAccept = 1,
  LoginReject = 2,
  ModelPull = 3,
  ModelPush = 4,
  ModelPayload = 5,
  AckSubmission = 6,
  RoundComplete = 7,
  TrainingFinished = 8,
  Error = 9,
};

std::string_view to_string(MsgType t);

/// A framed message between server and client.
///
/// Frame layout (all integers little-endian):
///   "FLR1" | u8 msg_type | u16 token_len | token | u32 round | u32 payload_len | payload
struct Envelope {
  MsgType msg_type = MsgType::LoginRequest;
  Bytes token;
  std::uint32_t round_index = 0;
  Bytes payload;

  bool operator==(const Envelope&) const = default;
};

inline constexpr std::uint8_t kFrameMagic[4] = {0x46, 0x4C, 0x52, 0x31};
inline constexpr std::size_t kFrameHeaderSize = 4 + 1 + 2 + 4 + 4;

/// Throws WireError(InvariantViolation) if the envelope breaks a framing invariant.
void validate(const Envelope& env);

Bytes encode_envelope(const Envelope& env);
Envelope decode_envelope(std::span<const std::uint8_t> bytes);

/// One named tensor inside a WeightSet.
struct WeightEntry {
  std::string name;
  std::vector<std::uint32_t> shape;
  DoubleBuffer data;

  std::size_t numel() const;
  bool operator==(const WeightEntry&) const = default;
};

/// Ordered, named collection of flat tensors exchanged between server and clients.
///
/// Entries are kept sorted by name and names are unique; construction enforces
/// both, so two sets with the same layout can be zipped positionally.
class WeightSet {
 public:
  WeightSet() = default;
  explicit WeightSet(std::vector<WeightEntry> entries, std::uint64_t sample_count = 0);

  const std::vector<WeightEntry>& entries() const { return entries_; }
  std::vector<WeightEntry>& mutable_entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::uint64_t sample_count() const { return sample_count_; }
  void set_sample_count(std::uint64_t n) { sample_count_ = n; }

  /// Binary search by name; nullptr if absent.
  const WeightEntry* find(std::string_view name) const;
  WeightEntry* find(std::string_view name);
  const WeightEntry& at(std::string_view name) const;
  WeightEntry& at(std::string_view name);

  /// Same names and shapes, in the same order.
  bool same_layout(const WeightSet& other) const;
  std::size_t total_numel() const;

  bool operator==(const WeightSet&) const = default;

 private:
  std::vector<WeightEntry> entries_;
  std::uint64_t sample_count_ = 0;
};

Bytes serialize_weights(const WeightSet& w);
WeightSet deserialize_weights(std::span<const std::uint8_t> bytes);

/// `.flw` checkpoints are serialize_weights output written verbatim.
void save_checkpoint(const std::string& path, const WeightSet& w);
WeightSet load_checkpoint(const std::string& path);

struct Credential {
  std::string client_id;
  Bytes secret;

  bool valid() const { return !client_id.empty() && secret.size() >= 16; }
  bool operator==(const Credential&) const = default;
};

Bytes encode_credential(const Credential& c);
Credential decode_credential(std::span<const std::uint8_t> bytes);

Bytes to_bytes(std::string_view s);

}  // namespace fedring::wire
