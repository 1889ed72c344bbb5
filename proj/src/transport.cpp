#include "fedring/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <openssl/err.h>
#include <openssl/ssl.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <csignal>
#include <cstring>
#include <iostream>

namespace fedring::transport {

void Trace::record(bool outbound, wire::Bytes frame) {
  std::lock_guard lock(mu_);
  entries_.push_back({outbound, std::move(frame)});
}

std::vector<TraceEntry> Trace::entries() const {
  std::lock_guard lock(mu_);
  return entries_;
}

wire::Envelope InMemoryChannel::request(const wire::Envelope& req) {
  wire::Bytes out = wire::encode_envelope(req);
  if (trace_) trace_->record(true, out);
  wire::Bytes in = srv_.handle_frame(out);
  if (trace_) trace_->record(false, in);
  return wire::decode_envelope(in);
}

namespace {

void ignore_sigpipe() {
  static const bool once = [] {
    std::signal(SIGPIPE, SIG_IGN);
    return true;
  }();
  (void)once;
}

std::string ssl_error() {
  char buf[256];
  ERR_error_string_n(ERR_get_error(), buf, sizeof buf);
  return buf;
}

// Blocking byte stream over a socket, with or without TLS.
struct Stream {
  int fd = -1;
  SSL* ssl = nullptr;

  bool write_all(const std::uint8_t* p, std::size_t n) {
    while (n > 0) {
      const long k = ssl ? SSL_write(ssl, p, static_cast<int>(std::min<std::size_t>(n, 1 << 30)))
                         : ::send(fd, p, n, MSG_NOSIGNAL);
      if (k <= 0) return false;
      p += k;
      n -= static_cast<std::size_t>(k);
    }
    return true;
  }

  bool read_exact(std::uint8_t* p, std::size_t n) {
    while (n > 0) {
      const long k = ssl ? SSL_read(ssl, p, static_cast<int>(std::min<std::size_t>(n, 1 << 30))) : ::recv(fd, p, n, 0);
      if (k <= 0) return false;
      p += k;
      n -= static_cast<std::size_t>(k);
    }
    return true;
  }

  bool write_frame(const wire::Bytes& frame) {
    std::uint8_t len[4];
    const auto n = static_cast<std::uint32_t>(frame.size());
    for (int i = 0; i < 4; ++i) len[i] = static_cast<std::uint8_t>(n >> (8 * i));
    return write_all(len, 4) && write_all(frame.data(), frame.size());
  }

  bool read_frame(wire::Bytes& frame) {
    std::uint8_t len[4];
    if (!read_exact(len, 4)) return false;
    std::uint32_t n = 0;
    for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(len[i]) << (8 * i);
    if (n > kMaxFrameBytes) return false;
    frame.resize(n);
    return read_exact(frame.data(), n);
  }

  void close() {
    if (ssl) {
      SSL_shutdown(ssl);
      SSL_free(ssl);
      ssl = nullptr;
    }
    if (fd >= 0) {
      ::close(fd);
      fd = -1;
    }
  }
};

}  // namespace

struct TcpChannel::Conn {
  Stream stream;
  SSL_CTX* ctx = nullptr;
  ~Conn() {
    stream.close();
    if (ctx) SSL_CTX_free(ctx);
  }
};

TcpChannel::TcpChannel(Endpoint ep, std::shared_ptr<Trace> trace) : ep_(std::move(ep)), trace_(std::move(trace)) {
  ignore_sigpipe();
}

TcpChannel::~TcpChannel() = default;

void TcpChannel::drop() { conn_.reset(); }

void TcpChannel::connect() {
  auto c = std::make_unique<Conn>();
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep_.port);
  if (getaddrinfo(ep_.host.c_str(), port.c_str(), &hints, &res) != 0 || !res)
    throw ConnectionLost("cannot resolve " + ep_.host);
  for (addrinfo* a = res; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
      c->stream.fd = fd;
      break;
    }
    ::close(fd);
  }
  freeaddrinfo(res);
  if (c->stream.fd < 0) throw ConnectionLost("cannot connect to " + ep_.host + ":" + port);
  const int one = 1;
  setsockopt(c->stream.fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);

  if (ep_.tls) {
    c->ctx = SSL_CTX_new(TLS_client_method());
    if (!c->ctx) throw std::runtime_error("SSL_CTX_new: " + ssl_error());
    SSL_CTX_set_min_proto_version(c->ctx, TLS1_2_VERSION);
    if (!ep_.ca_cert_path.empty()) {
      if (SSL_CTX_load_verify_locations(c->ctx, ep_.ca_cert_path.c_str(), nullptr) != 1)
        throw std::runtime_error("cannot load CA " + ep_.ca_cert_path + ": " + ssl_error());
      SSL_CTX_set_verify(c->ctx, SSL_VERIFY_PEER, nullptr);
    }
    c->stream.ssl = SSL_new(c->ctx);
    SSL_set_fd(c->stream.ssl, c->stream.fd);
    SSL_set_tlsext_host_name(c->stream.ssl, ep_.host.c_str());
    if (!ep_.ca_cert_path.empty()) SSL_set1_host(c->stream.ssl, ep_.host.c_str());
    if (SSL_connect(c->stream.ssl) != 1) throw ConnectionLost("TLS handshake failed: " + ssl_error());
  }
  conn_ = std::move(c);
}

wire::Envelope TcpChannel::request(const wire::Envelope& req) {
  const wire::Bytes out = wire::encode_envelope(req);
  if (!conn_) connect();
  if (trace_) trace_->record(true, out);
  wire::Bytes in;
  if (!conn_->stream.write_frame(out) || !conn_->stream.read_frame(in)) {
    drop();
    throw ConnectionLost("connection to " + ep_.host + " lost");
  }
  if (trace_) trace_->record(false, in);
  return wire::decode_envelope(in);
}

struct TcpServer::Tls {
  SSL_CTX* ctx = nullptr;
  ~Tls() {
    if (ctx) SSL_CTX_free(ctx);
  }
};

TcpServer::TcpServer(server::Server& srv, std::uint16_t port, std::string cert_path, std::string key_path)
    : srv_(srv), port_(port), cert_path_(std::move(cert_path)), key_path_(std::move(key_path)) {}

TcpServer::~TcpServer() { stop(); }

void TcpServer::start() {
  ignore_sigpipe();
  if (!cert_path_.empty()) {
    tls_ = std::make_unique<Tls>();
    tls_->ctx = SSL_CTX_new(TLS_server_method());
    if (!tls_->ctx) throw std::runtime_error("SSL_CTX_new: " + ssl_error());
    SSL_CTX_set_min_proto_version(tls_->ctx, TLS1_2_VERSION);
    if (SSL_CTX_use_certificate_chain_file(tls_->ctx, cert_path_.c_str()) != 1 ||
        SSL_CTX_use_PrivateKey_file(tls_->ctx, key_path_.c_str(), SSL_FILETYPE_PEM) != 1 ||
        SSL_CTX_check_private_key(tls_->ctx) != 1)
      throw std::runtime_error("cannot load TLS certificate/key: " + ssl_error());
  }

  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket() failed");
  const int one = 1;
  setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  addr.sin_port = htons(port_);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 16) != 0)
    throw std::runtime_error("cannot listen on port " + std::to_string(port_) + ": " + std::strerror(errno));
  socklen_t len = sizeof addr;
  getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);

  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void TcpServer::accept_loop() {
  while (running_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (!running_) break;
      continue;
    }
    const int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lock(conns_mu_);
    conn_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { serve(fd); });
  }
}

void TcpServer::serve(int fd) {
  Stream s{fd, nullptr};
  bool ok = true;
  if (tls_) {
    s.ssl = SSL_new(tls_->ctx);
    SSL_set_fd(s.ssl, fd);
    ok = SSL_accept(s.ssl) == 1;
  }
  wire::Bytes frame;
  while (ok && running_ && s.read_frame(frame)) {
    wire::Bytes reply;
    try {
      reply = srv_.handle_frame(frame);
    } catch (const wire::WireError& e) {
      std::cerr << "dropping connection after malformed frame: " << e.what() << '\n';
      break;
    }
    if (!s.write_frame(reply)) break;
  }
  {
    std::lock_guard lock(conns_mu_);
    conn_fds_.erase(std::remove(conn_fds_.begin(), conn_fds_.end(), fd), conn_fds_.end());
    s.close();
  }
}

void TcpServer::stop() {
  if (!running_.exchange(false)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  listen_fd_ = -1;
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(conns_mu_);
    for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
    workers.swap(workers_);
  }
  for (auto& t : workers) t.join();
}

}  // namespace fedring::transport
