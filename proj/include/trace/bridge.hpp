#pragma once

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "trace/common.hpp"
#include "trace/predictor.hpp"

extern char** environ;

namespace trace {

// Bridge wire protocol (UTF-8, one JSON object per line):
//   server -> client on connect: {"protocol":"trace-bridge/1","latent_dim":<int|null>}
//   client -> server:            {"id":<n>,"kind":"predict"|"latent","texts":[...]}
//   server -> client:            {"id":<n>,"log_odds":[...]} | {"id":<n>,"vectors":[[...]]}
//                                | {"id":<n>,"error":"..."}
inline constexpr std::string_view kBridgeProtocol = "trace-bridge/1";

struct BridgeEndpoint {
  enum class Transport { stdio, tcp };
  Transport transport = Transport::stdio;
  std::string command;  // stdio: run through /bin/sh -c
  std::string host = "127.0.0.1";
  int port = 0;
  double timeout_seconds = 300.0;
};

enum class BridgeKind { predict, latent };

struct BridgeRequest {
  BridgeKind kind = BridgeKind::predict;
  std::vector<std::string> texts;
};

struct BridgeResponse {
  std::uint64_t id = 0;
  std::vector<double> log_odds;               // predict
  std::vector<std::vector<double>> vectors;   // latent
};

/// One serially-owned session with an external model server.
///
/// Calls are serialized by an internal mutex; a batch of requests is pipelined
/// and the responses must come back in request order with matching ids.
class BridgeClient {
 public:
  explicit BridgeClient(BridgeEndpoint endpoint) : endpoint_(std::move(endpoint)) {
    // writes to a dead server must surface as errors, not kill the process
    std::signal(SIGPIPE, SIG_IGN);
    if (endpoint_.transport == BridgeEndpoint::Transport::stdio) {
      spawn();
    } else {
      connect_tcp();
    }
    ::fcntl(read_fd_, F_SETFL, ::fcntl(read_fd_, F_GETFL) | O_NONBLOCK);
    ::fcntl(write_fd_, F_SETFL, ::fcntl(write_fd_, F_GETFL) | O_NONBLOCK);
    handshake();
  }

  BridgeClient(const BridgeClient&) = delete;
  BridgeClient& operator=(const BridgeClient&) = delete;

  ~BridgeClient() { shutdown(); }

  std::optional<std::size_t> latent_dim() const { return latent_dim_; }

  std::vector<BridgeResponse> call_batch(std::span<const BridgeRequest> requests) {
    std::lock_guard lock(mutex_);
    std::vector<std::uint64_t> ids;
    std::string wire;
    for (const auto& r : requests) {
      if (r.texts.empty()) throw InputError("bridge request needs at least one text");
      const auto id = next_id_++;
      ids.push_back(id);
      nlohmann::ordered_json j;
      j["id"] = id;
      j["kind"] = r.kind == BridgeKind::predict ? "predict" : "latent";
      j["texts"] = r.texts;
      wire += j.dump();
      wire += '\n';
    }
    std::vector<BridgeResponse> out;
    out.reserve(requests.size());
    std::size_t written = 0;
    bool write_failed = false;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(endpoint_.timeout_seconds);
    // Interleave writing and reading so neither side blocks on a full pipe.
    while (out.size() < requests.size()) {
      while (out.size() < requests.size()) {
        auto line = take_line();
        if (!line) break;
        out.push_back(parse_response(*line, ids[out.size()], requests[out.size()]));
      }
      if (out.size() == requests.size()) break;
      // the server went away mid-batch; whatever it wrote has been parsed above
      if (write_failed) throw Error("bridge closed");
      const bool want_write = written < wire.size();
      pollfd fds[2];
      nfds_t nfds = 0;
      const int read_slot = 0;
      int write_slot = -1;
      fds[nfds++] = {read_fd_, POLLIN, 0};
      if (want_write) {
        if (write_fd_ == read_fd_) {
          fds[0].events |= POLLOUT;
          write_slot = 0;
        } else {
          write_slot = static_cast<int>(nfds);
          fds[nfds++] = {write_fd_, POLLOUT, 0};
        }
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw Error("bridge timeout");
      const int pr = ::poll(fds, nfds, static_cast<int>(std::min<long>(left.count(), 1000)));
      if (pr < 0 && errno != EINTR) throw Error("bridge: poll failed");
      if (pr <= 0) continue;
      if (write_slot >= 0 && (fds[write_slot].revents & (POLLOUT | POLLERR | POLLHUP))) {
        const auto n = ::write(write_fd_, wire.data() + written, std::min<std::size_t>(wire.size() - written, 65536));
        if (n < 0 && errno != EINTR && errno != EAGAIN) {
          fill_buffer_nonblocking();
          write_failed = true;
          continue;
        }
        if (n > 0) written += static_cast<std::size_t>(n);
      }
      if (fds[read_slot].revents & (POLLIN | POLLHUP | POLLERR)) {
        if (!fill_buffer_nonblocking() && !take_line_available()) throw Error("bridge closed");
      }
    }
    return out;
  }

  BridgeResponse call(const BridgeRequest& request) { return call_batch(std::span(&request, 1)).front(); }

  std::vector<double> predict(std::span<const std::string> texts) {
    return call({BridgeKind::predict, {texts.begin(), texts.end()}}).log_odds;
  }

  std::vector<std::vector<double>> latent(std::span<const std::string> texts) {
    return call({BridgeKind::latent, {texts.begin(), texts.end()}}).vectors;
  }

 private:
  void spawn() {
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) throw Error("bridge: pipe() failed");
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);
    posix_spawn_file_actions_addclose(&actions, to_child[1]);
    posix_spawn_file_actions_addclose(&actions, from_child[0]);
    std::string sh = "/bin/sh";
    std::string dash_c = "-c";
    std::string cmd = endpoint_.command;
    char* argv[] = {sh.data(), dash_c.data(), cmd.data(), nullptr};
    const int rc = posix_spawn(&pid_, "/bin/sh", &actions, nullptr, argv, environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(to_child[0]);
    ::close(from_child[1]);
    if (rc != 0) {
      ::close(to_child[1]);
      ::close(from_child[0]);
      throw Error("bridge: cannot start '" + endpoint_.command + "'");
    }
    ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
  }

  void connect_tcp() {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const auto port = std::to_string(endpoint_.port);
    if (::getaddrinfo(endpoint_.host.c_str(), port.c_str(), &hints, &res) != 0) {
      throw Error("bridge: cannot resolve " + endpoint_.host);
    }
    int fd = -1;
    for (auto* p = res; p != nullptr; p = p->ai_next) {
      fd = ::socket(p->ai_family, p->ai_socktype | SOCK_CLOEXEC, p->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
      ::close(fd);
      fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw Error("bridge: cannot connect to " + endpoint_.host + ":" + port);
    read_fd_ = fd;
    write_fd_ = fd;
  }

  void handshake() {
    const auto line = read_line();
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw Error("protocol error: bad handshake line: " + line);
    }
    if (!j.is_object() || !j.contains("protocol") || j["protocol"] != kBridgeProtocol) {
      throw Error("protocol error: unsupported handshake: " + line);
    }
    if (j.contains("latent_dim") && !j["latent_dim"].is_null()) {
      if (!j["latent_dim"].is_number_unsigned() || j["latent_dim"].get<std::size_t>() == 0) {
        throw Error("protocol error: latent_dim must be a positive integer or null: " + line);
      }
      latent_dim_ = j["latent_dim"].get<std::size_t>();
    }
  }

  std::optional<std::string> take_line() {
    const auto nl = buffer_.find('\n');
    if (nl == std::string::npos) return std::nullopt;
    std::string line = buffer_.substr(0, nl);
    buffer_.erase(0, nl + 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
  }

  bool take_line_available() const { return buffer_.find('\n') != std::string::npos; }

  // Reads whatever is available; false on end of stream.
  bool fill_buffer_nonblocking() {
    for (;;) {
      char chunk[65536];
      const auto n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        if (errno == EAGAIN || errno == EWOULDBLOCK) return true;
        return false;
      }
      if (n == 0) return false;
      buffer_.append(chunk, static_cast<std::size_t>(n));
      if (static_cast<std::size_t>(n) < sizeof chunk) return true;
    }
  }

  std::string read_line() {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(endpoint_.timeout_seconds);
    for (;;) {
      if (auto line = take_line()) return *line;
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw Error("bridge timeout");
      pollfd pfd{read_fd_, POLLIN, 0};
      const int pr = ::poll(&pfd, 1, static_cast<int>(std::min<long>(left.count(), 1000)));
      if (pr < 0 && errno != EINTR) throw Error("bridge: poll failed");
      if (pr <= 0) continue;
      if (!fill_buffer_nonblocking() && !take_line_available()) throw Error("bridge closed");
    }
  }

  BridgeResponse parse_response(const std::string& line, std::uint64_t expected_id, const BridgeRequest& req) {
    auto fail = [&](const std::string& why) -> Error { return Error("protocol error (" + why + "): " + line); };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      throw fail("not JSON");
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_number_unsigned()) throw fail("missing id");
    BridgeResponse r;
    r.id = j["id"].get<std::uint64_t>();
    if (r.id != expected_id) throw fail("expected id " + std::to_string(expected_id));
    if (j.contains("error")) {
      throw Error("bridge error: " + (j["error"].is_string() ? j["error"].get<std::string>() : j["error"].dump()));
    }
    try {
      if (req.kind == BridgeKind::predict) {
        if (!j.contains("log_odds")) throw fail("missing log_odds");
        r.log_odds = j["log_odds"].get<std::vector<double>>();
        if (r.log_odds.size() != req.texts.size()) throw fail("length mismatch");
        for (double v : r.log_odds) {
          if (!std::isfinite(v)) throw fail("non-finite log-odds");
        }
      } else {
        if (!j.contains("vectors")) throw fail("missing vectors");
        r.vectors = j["vectors"].get<std::vector<std::vector<double>>>();
        if (r.vectors.size() != req.texts.size()) throw fail("length mismatch");
        const auto dim = latent_dim_.value_or(r.vectors.front().size());
        for (const auto& v : r.vectors) {
          if (v.size() != dim || dim == 0) throw fail("latent dimension mismatch");
        }
      }
    } catch (const nlohmann::json::exception&) {
      throw fail("bad payload type");
    }
    return r;
  }

  void shutdown() {
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    write_fd_ = read_fd_ = -1;
    if (pid_ > 0) {
      int status = 0;
      for (int i = 0; i < 200; ++i) {
        if (::waitpid(pid_, &status, WNOHANG) != 0) {
          pid_ = -1;
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      ::kill(pid_, SIGTERM);
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  BridgeEndpoint endpoint_;
  std::mutex mutex_;
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  std::string buffer_;
  std::uint64_t next_id_ = 1;
  std::optional<std::size_t> latent_dim_;
};

/// Predictor served over the bridge; requests are chunked into batches.
class BridgePredictor final : public Predictor {
 public:
  explicit BridgePredictor(std::shared_ptr<BridgeClient> client, std::size_t batch_size = 64)
      : client_(std::move(client)), batch_size_(std::max<std::size_t>(1, batch_size)) {}

  double log_odds(std::string_view text) const override {
    const std::string t(text);
    return client_->predict(std::span(&t, 1)).front();
  }

  std::vector<double> log_odds_batch(std::span<const std::string> texts) const override {
    std::vector<double> out;
    out.reserve(texts.size());
    std::vector<BridgeRequest> reqs;
    for (std::size_t at = 0; at < texts.size(); at += batch_size_) {
      const auto stop = std::min(texts.size(), at + batch_size_);
      reqs.push_back({BridgeKind::predict, {texts.begin() + static_cast<long>(at), texts.begin() + static_cast<long>(stop)}});
    }
    if (reqs.empty()) return out;
    for (auto& r : client_->call_batch(reqs)) out.insert(out.end(), r.log_odds.begin(), r.log_odds.end());
    return out;
  }

  std::vector<double> log_odds_tokens_batch(std::span<const std::vector<std::string>> seqs) const override {
    std::vector<std::string> texts;
    texts.reserve(seqs.size());
    for (const auto& s : seqs) texts.push_back(join_tokens(s));
    return log_odds_batch(texts);
  }

  std::size_t latent_dim() const override { return client_->latent_dim().value_or(0); }

  std::vector<double> latent(std::string_view text) const override {
    if (!client_->latent_dim()) throw Error("bridge server exposes no latent space");
    const std::string t(text);
    return client_->latent(std::span(&t, 1)).front();
  }

  std::vector<std::vector<double>> latent_batch(std::span<const std::string> texts) const override {
    if (!client_->latent_dim()) throw Error("bridge server exposes no latent space");
    std::vector<std::vector<double>> out;
    std::vector<BridgeRequest> reqs;
    for (std::size_t at = 0; at < texts.size(); at += batch_size_) {
      const auto stop = std::min(texts.size(), at + batch_size_);
      reqs.push_back({BridgeKind::latent, {texts.begin() + static_cast<long>(at), texts.begin() + static_cast<long>(stop)}});
    }
    if (reqs.empty()) return out;
    for (auto& r : client_->call_batch(reqs)) {
      for (auto& v : r.vectors) out.push_back(std::move(v));
    }
    return out;
  }

  std::string name() const override { return "bridge"; }

 private:
  std::shared_ptr<BridgeClient> client_;
  std::size_t batch_size_;
};

}  // namespace trace
