#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "fedring/server.hpp"
#include "fedring/wire.hpp"

namespace fedring::transport {

class ConnectionLost : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Client side of a request/response link to the server.
class Channel {
 public:
  virtual ~Channel() = default;
  /// Throws ConnectionLost when the peer cannot be reached.
  virtual wire::Envelope request(const wire::Envelope& req) = 0;
};

struct TraceEntry {
  bool outbound = false;  // client to server
  wire::Bytes frame;
};

/// Thread-safe log of every frame crossing a channel.
class Trace {
 public:
  void record(bool outbound, wire::Bytes frame);
  std::vector<TraceEntry> entries() const;

 private:
  mutable std::mutex mu_;
  std::vector<TraceEntry> entries_;
};

/// Calls straight into a Server through the same encode/decode path as TCP.
class InMemoryChannel : public Channel {
 public:
  explicit InMemoryChannel(server::Server& srv, std::shared_ptr<Trace> trace = nullptr)
      : srv_(srv), trace_(std::move(trace)) {}
  wire::Envelope request(const wire::Envelope& req) override;

 private:
  server::Server& srv_;
  std::shared_ptr<Trace> trace_;
};

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 7950;
  bool tls = false;
  std::string ca_cert_path;  // verify the server against this CA when set
};

/// Frames travel as u32 little-endian length + encoded envelope. Reconnects lazily.
class TcpChannel : public Channel {
 public:
  explicit TcpChannel(Endpoint ep, std::shared_ptr<Trace> trace = nullptr);
  ~TcpChannel() override;
  TcpChannel(const TcpChannel&) = delete;
  TcpChannel& operator=(const TcpChannel&) = delete;

  wire::Envelope request(const wire::Envelope& req) override;

 private:
  struct Conn;
  void connect();
  void drop();

  Endpoint ep_;
  std::shared_ptr<Trace> trace_;
  std::unique_ptr<Conn> conn_;
};

/// Accepts TCP (optionally TLS) connections and feeds each frame to the Server.
class TcpServer {
 public:
  TcpServer(server::Server& srv, std::uint16_t port, std::string cert_path = {}, std::string key_path = {});
  ~TcpServer();
  TcpServer(const TcpServer&) = delete;
  TcpServer& operator=(const TcpServer&) = delete;

  /// Binds and starts accepting on a background thread. Port 0 picks a free port.
  void start();
  std::uint16_t port() const { return port_; }
  void stop();

 private:
  struct Tls;
  void accept_loop();
  void serve(int fd);

  server::Server& srv_;
  std::uint16_t port_;
  std::string cert_path_, key_path_;
  std::unique_ptr<Tls> tls_;
  int listen_fd_ = -1;
  std::atomic<bool> running_{false};
  std::thread acceptor_;
  std::mutex conns_mu_;
  std::vector<int> conn_fds_;
  std::vector<std::thread> workers_;
};

inline constexpr std::uint32_t kMaxFrameBytes = 1u << 30;

}  // namespace fedring::transport
