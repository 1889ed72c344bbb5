#include "fedring/wire.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "fedring/bytes.hpp"

namespace fedring::wire {

std::string_view to_string(WireErrc e) {
  switch (e) {
    case WireErrc::BadMagic: return "BadMagic";
    case WireErrc::TruncatedFrame: return "TruncatedFrame";
    case WireErrc::UnknownMsgType: return "UnknownMsgType";
    case WireErrc::LengthMismatch: return "LengthMismatch";
    case WireErrc::InvariantViolation: return "InvariantViolation";
    case WireErrc::NonFiniteWeight: return "NonFiniteWeight";
  }
  return "?";
}

std::string_view to_string(MsgType t) {
  switch (t) {
    case MsgType::LoginRequest: return "LoginRequest";
    case MsgType::LoginAccept: return "LoginAccept";
    case MsgType::LoginReject: return "LoginReject";
    case MsgType::ModelPull: return "ModelPull";
    case MsgType::ModelPush: return "ModelPush";
    case MsgType::ModelPayload: return "ModelPayload";
    case MsgType::AckSubmission: return "AckSubmission";
    case MsgType::RoundComplete: return "RoundComplete";
    case MsgType::TrainingFinished: return "TrainingFinished";
    case MsgType::Error: return "Error";
  }
  return "?";
}

namespace {

[[noreturn]] void fail(WireErrc code, const std::string& msg) {
  throw WireError(code, std::string(to_string(code)) + ": " + msg);
}

constexpr std::uint8_t kMaxMsgType = static_cast<std::uint8_t>(MsgType::Error);

}  // namespace

void validate(const Envelope& env) {
  const bool tokenless = env.msg_type == MsgType::LoginRequest || env.msg_type == MsgType::LoginReject;
  if (!tokenless && env.token.empty()) fail(WireErrc::InvariantViolation, "token required for " + std::string(to_string(env.msg_type)));
  if ((env.msg_type == MsgType::LoginRequest || env.msg_type == MsgType::LoginAccept) && env.round_index != 0)
    fail(WireErrc::InvariantViolation, "login messages carry round 0");
  if (env.token.size() > 0xFFFF) fail(WireErrc::InvariantViolation, "token too long");
  if (env.payload.size() > 0xFFFFFFFFull) fail(WireErrc::InvariantViolation, "payload too long");
}

Bytes encode_envelope(const Envelope& env) {
  validate(env);
  ByteWriter w;
  w.buffer().reserve(kFrameHeaderSize + env.token.size() + env.payload.size());
  w.raw(std::span<const std::uint8_t>(kFrameMagic, 4));
  w.u8(static_cast<std::uint8_t>(env.msg_type));
  w.u16(static_cast<std::uint16_t>(env.token.size()));
  w.raw(env.token);
  w.u32(env.round_index);
  w.u32(static_cast<std::uint32_t>(env.payload.size()));
  w.raw(env.payload);
  return w.take();
}

Envelope decode_envelope(std::span<const std::uint8_t> bytes) {
  const std::size_t magic_avail = std::min<std::size_t>(bytes.size(), 4);
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(magic_avail), kFrameMagic))
    fail(WireErrc::BadMagic, "frame does not start with FLR1");
  if (bytes.size() < 5) fail(WireErrc::TruncatedFrame, "missing header");

  ByteReader r(bytes.subspan(4));
  Envelope env;
  const std::uint8_t tag = r.u8();
  if (tag > kMaxMsgType) fail(WireErrc::UnknownMsgType, "tag " + std::to_string(tag));
  env.msg_type = static_cast<MsgType>(tag);

  const std::uint16_t token_len = r.u16();
  auto token = r.take(token_len);
  env.round_index = r.u32();
  const std::uint32_t payload_len = r.u32();
  if (!r.ok()) fail(WireErrc::TruncatedFrame, "header cut short");
  if (r.remaining() < payload_len) fail(WireErrc::TruncatedFrame, "payload cut short");
  if (r.remaining() > payload_len)
    fail(WireErrc::LengthMismatch, "payload_len " + std::to_string(payload_len) + " but " +
                                       std::to_string(r.remaining()) + " bytes follow");
  auto payload = r.take(payload_len);
  env.token.assign(token.begin(), token.end());
  env.payload.assign(payload.begin(), payload.end());
  validate(env);
  return env;
}

std::size_t WeightEntry::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

WeightSet::WeightSet(std::vector<WeightEntry> entries, std::uint64_t sample_count)
    : entries_(std::move(entries)), sample_count_(sample_count) {
  std::sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    if (e.name.empty() || e.name.size() > 0xFFFF) fail(WireErrc::InvariantViolation, "bad entry name");
    if (i > 0 && entries_[i - 1].name == e.name) fail(WireErrc::InvariantViolation, "duplicate entry " + e.name);
    if (std::any_of(e.shape.begin(), e.shape.end(), [](auto d) { return d == 0; }))
      fail(WireErrc::InvariantViolation, "zero dimension in " + e.name);
    if (e.shape.size() > 0xFF) fail(WireErrc::InvariantViolation, "rank too large in " + e.name);
    if (e.numel() != e.data.size()) fail(WireErrc::InvariantViolation, "shape/data size mismatch in " + e.name);
  }
}

const WeightEntry* WeightSet::find(std::string_view name) const {
  auto it = std::lower_bound(entries_.begin(), entries_.end(), name,
                             [](const WeightEntry& e, std::string_view n) { return e.name < n; });
  return (it != entries_.end() && it->name == name) ? &*it : nullptr;
}

WeightEntry* WeightSet::find(std::string_view name) {
  return const_cast<WeightEntry*>(std::as_const(*this).find(name));
}

const WeightEntry& WeightSet::at(std::string_view name) const {
  const auto* e = find(name);
  if (!e) throw std::out_of_range("no weight entry named " + std::string(name));
  return *e;
}

WeightEntry& WeightSet::at(std::string_view name) {
  return const_cast<WeightEntry&>(std::as_const(*this).at(name));
}

bool WeightSet::same_layout(const WeightSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name || entries_[i].shape != other.entries_[i].shape) return false;
  }
  return true;
}

std::size_t WeightSet::total_numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.data.size();
  return n;
}

Bytes serialize_weights(const WeightSet& w) {
  ByteWriter out;
  out.buffer().reserve(12 + w.total_numel() * 8 + w.size() * 32);
  out.u32(static_cast<std::uint32_t>(w.size()));
  for (const auto& e : w.entries()) {
    for (double v : e.data)
      if (!std::isfinite(v)) fail(WireErrc::NonFiniteWeight, "entry " + e.name);
    out.u16(static_cast<std::uint16_t>(e.name.size()));
    out.raw(e.name);
    out.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) out.u32(d);
    for (double v : e.data) out.f64(v);
  }
  out.u64(w.sample_count());
  return out.take();
}

WeightSet deserialize_weights(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const std::uint32_t count = r.u32();
  if (!r.ok()) fail(WireErrc::TruncatedFrame, "missing entry count");
  std::vector<WeightEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightEntry e;
    const std::uint16_t name_len = r.u16();
    auto name = r.take(name_len);
    const std::uint8_t rank = r.u8();
    if (!r.ok()) fail(WireErrc::TruncatedFrame, "entry header cut short");
    e.name.assign(name.begin(), name.end());
    std::size_t numel = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.u32();
      if (!r.ok()) fail(WireErrc::TruncatedFrame, "dims cut short");
      if (d == 0) fail(WireErrc::InvariantViolation, "zero dimension in " + e.name);
      e.shape.push_back(d);
      numel *= d;
    }
    if (r.remaining() / 8 < numel) fail(WireErrc::TruncatedFrame, "data cut short in " + e.name);
    e.data.resize(numel);
    for (auto& v : e.data) {
      v = r.f64();
      if (!std::isfinite(v)) fail(WireErrc::NonFiniteWeight, "entry " + e.name);
    }
    if (!entries.empty() && !(entries.back().name < e.name))
      fail(WireErrc::InvariantViolation, "entry names not strictly sorted at " + e.name);
    entries.push_back(std::move(e));
  }
  const std::uint64_t sample_count = r.u64();
  if (!r.ok()) fail(WireErrc::TruncatedFrame, "missing sample_count");
  if (r.remaining() != 0) fail(WireErrc::LengthMismatch, std::to_string(r.remaining()) + " trailing bytes");
  return WeightSet(std::move(entries), sample_count);
}

void save_checkpoint(const std::string& path, const WeightSet& w) {
  const auto bytes = serialize_weights(w);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp);
}

WeightSet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  Bytes bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

Bytes encode_credential(const Credential& c) {
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(c.client_id.size()));
  w.raw(c.client_id);
  w.u16(static_cast<std::uint16_t>(c.secret.size()));
  w.raw(c.secret);
  return w.take();
}

Credential decode_credential(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  Credential c;
  auto id = r.take(r.u16());
  auto secret = r.take(r.u16());
  if (!r.ok()) fail(WireErrc::TruncatedFrame, "credential cut short");
  if (r.remaining() != 0) fail(WireErrc::LengthMismatch, "trailing bytes after credential");
  c.client_id.assign(id.begin(), id.end());
  c.secret.assign(secret.begin(), secret.end());
  return c;
}

Bytes to_bytes(std::string_view s) { return Bytes(s.begin(), s.end()); }

}  // namespace fedring::wire
