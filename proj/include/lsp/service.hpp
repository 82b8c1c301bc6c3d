#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lsp/latent_store.hpp"
#include "lsp/pipeline.hpp"
#include "lsp/probes.hpp"

// Long-running scoring service: newline-delimited JSON requests over a local
// TCP socket. Each request references a latent by archive clip id or carries
// an inline base64 tensor payload; each response carries the safety score and
// threshold decision. The model is shared read-only across connections.
namespace lsp::service {

inline constexpr size_t kMaxInlinePayloadBytes = 64ull * 1024 * 1024;

// --- base64 (standard alphabet, padded) ---

inline const char* b64_alphabet() {
    return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

inline std::string base64_encode(const std::string& in) {
    const char* tab = b64_alphabet();
    std::string out;
    out.reserve(((in.size() + 2) / 3) * 4);
    size_t i = 0;
    while (i + 3 <= in.size()) {
        const uint32_t v = (static_cast<uint8_t>(in[i]) << 16) |
                           (static_cast<uint8_t>(in[i + 1]) << 8) | static_cast<uint8_t>(in[i + 2]);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
        i += 3;
    }
    const size_t rem = in.size() - i;
    if (rem == 1) {
        const uint32_t v = static_cast<uint8_t>(in[i]) << 16;
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back('=');
        out.push_back('=');
    } else if (rem == 2) {
        const uint32_t v =
            (static_cast<uint8_t>(in[i]) << 16) | (static_cast<uint8_t>(in[i + 1]) << 8);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::string base64_decode(const std::string& in) {
    static const auto make_rev = [] {
        std::vector<int8_t> rev(256, -1);
        const char* tab = b64_alphabet();
        for (int i = 0; i < 64; ++i) rev[static_cast<uint8_t>(tab[i])] = static_cast<int8_t>(i);
        return rev;
    };
    static const std::vector<int8_t> rev = make_rev();
    if (in.size() % 4 != 0) throw DataError("base64 payload length must be a multiple of 4");
    std::string out;
    out.reserve((in.size() / 4) * 3);
    for (size_t i = 0; i < in.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = in[i + k];
            if (c == '=') {
                if (i + 4 != in.size() || k < 2) throw DataError("base64 padding misplaced");
                vals[k] = 0;
                ++pad;
            } else {
                if (pad > 0) throw DataError("base64 padding misplaced");
                const int8_t v = rev[static_cast<uint8_t>(c)];
                if (v < 0) throw DataError("invalid base64 character");
                vals[k] = v;
            }
        }
        const uint32_t v = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
        out.push_back(static_cast<char>((v >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<char>((v >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<char>(v & 0xff));
    }
    return out;
}

// --- service configuration & core request handling ---

struct ServiceConfig {
    std::string bind_address = "127.0.0.1";
    int port = 0;  // 0 -> ephemeral port, reported after bind
    double tau = 0.5;
    std::string checkpoint_id = "unnamed-checkpoint";
};

/// Shared immutable scoring state. The probe is only ever used in eval mode,
/// which performs no writes to parameters or buffers, so concurrent
/// connections may score through the same instance.
struct Scorer {
    std::shared_ptr<Probe<float>> model;
    std::optional<store::Archive> archive;
    store::Manifest manifest;
    ServiceConfig config;
};

/// Handles one request line; always returns a single JSON response line
/// (without trailing newline). Never throws: protocol errors become error
/// responses so the connection can stay open.
inline std::string handle_request_line(const Scorer& scorer, const std::string& line) {
    using nlohmann::json;
    std::string id;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        json req;
        try {
            req = json::parse(line);
        } catch (const json::exception& e) {
            throw DataError(std::string("malformed request: ") + e.what());
        }
        if (!req.is_object()) throw DataError("request must be a JSON object");
        if (!req.contains("id") || !req["id"].is_string())
            throw DataError("request needs a string \"id\" field");
        id = req["id"].get<std::string>();
        const bool has_clip = req.contains("clip_id");
        const bool has_inline = req.contains("latent_b64");
        if (has_clip == has_inline)
            throw DataError("request needs exactly one of \"clip_id\" or \"latent_b64\"");
        Tensor latent;
        if (has_clip) {
            if (!req["clip_id"].is_string()) throw DataError("\"clip_id\" must be a string");
            if (!scorer.archive.has_value())
                throw DataError("service has no archive configured; send inline latents");
            latent = scorer.archive->read_latent(scorer.manifest, req["clip_id"].get<std::string>());
        } else {
            if (!req["latent_b64"].is_string()) throw DataError("\"latent_b64\" must be a string");
            const std::string& b64 = req["latent_b64"].get_ref<const std::string&>();
            // Conservative pre-check: decoded size is at most 3/4 of the text.
            if (b64.size() / 4 * 3 > kMaxInlinePayloadBytes + 2)
                throw DataError("inline payload exceeds the 64 MB limit");
            const std::string raw = base64_decode(b64);
            if (raw.size() > kMaxInlinePayloadBytes)
                throw DataError("inline payload exceeds the 64 MB limit");
            latent = store::decode_tensor(raw, "inline payload");
        }
        if (latent.ndim() != 4)
            throw DataError("latent must be a 4-axis tensor, got " + shape_str(latent.shape()));
        const double score = pipeline::probe_hook(latent, *scorer.model);
        pipeline::GuardConfig guard;
        guard.tau = scorer.config.tau;
        const pipeline::Decision decision = pipeline::guard_decision(score, guard);
        const double ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
        json resp{{"id", id},
                  {"score", score},
                  {"decision", pipeline::decision_name(decision)},
                  {"checkpoint", scorer.config.checkpoint_id},
                  {"elapsed_ms", ms}};
        return resp.dump();
    } catch (const std::exception& e) {
        json err{{"id", id}, {"error", e.what()}};
        return err.dump();
    }
}

// --- TCP server ---

class Server {
public:
    Server(Scorer scorer) : scorer_(std::move(scorer)) {}
    ~Server() {
        request_stop();
        join();
        if (listen_fd_ >= 0) ::close(listen_fd_);
    }

    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds and listens; with port 0 an ephemeral port is chosen and
    /// readable via port() afterwards.
    void start() {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw std::runtime_error("socket() failed");
        const int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(static_cast<uint16_t>(scorer_.config.port));
        if (::inet_pton(AF_INET, scorer_.config.bind_address.c_str(), &addr.sin_addr) != 1)
            throw ConfigError("invalid bind address " + scorer_.config.bind_address);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
            throw std::runtime_error("cannot bind " + scorer_.config.bind_address + ":" +
                                     std::to_string(scorer_.config.port));
        if (::listen(listen_fd_, 64) != 0) throw std::runtime_error("listen() failed");
        sockaddr_in bound{};
        socklen_t len = sizeof(bound);
        if (::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len) == 0)
            port_ = ntohs(bound.sin_port);
    }

    int port() const { return port_; }

    /// Accept loop; returns once `stop` or request_stop() fires (checked
    /// every poll tick) and all connection handlers have finished.
    void run(const std::atomic<bool>& stop) {
        while (!stop.load(std::memory_order_relaxed) &&
               !stop_requested_.load(std::memory_order_relaxed)) {
            pollfd pfd{listen_fd_, POLLIN, 0};
            const int rc = ::poll(&pfd, 1, 200);
            if (rc < 0) {
                if (errno == EINTR) continue;
                break;
            }
            if (rc == 0 || !(pfd.revents & POLLIN)) continue;
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) continue;
            {
                std::lock_guard<std::mutex> lk(mu_);
                open_fds_.insert(fd);
            }
            workers_.emplace_back([this, fd] { serve_connection(fd); });
        }
        shutdown_connections();
        join_workers();
    }

    /// Runs the accept loop on a background thread (used by tests and by the
    /// CLI's signal-driven shutdown path).
    void run_async(const std::atomic<bool>& stop) {
        accept_thread_ = std::thread([this, &stop] { run(stop); });
    }

    void request_stop() { stop_requested_.store(true, std::memory_order_relaxed); }

    void join() {
        if (accept_thread_.joinable()) accept_thread_.join();
        join_workers();
    }

private:
    void join_workers() {
        for (auto& t : workers_)
            if (t.joinable()) t.join();
        workers_.clear();
    }

    void serve_connection(int fd) {
        std::string buffer;
        char chunk[4096];
        for (;;) {
            const ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
            if (n <= 0) break;
            buffer.append(chunk, static_cast<size_t>(n));
            size_t pos;
            while ((pos = buffer.find('\n')) != std::string::npos) {
                std::string line = buffer.substr(0, pos);
                buffer.erase(0, pos + 1);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                if (line.empty()) continue;
                std::string resp = handle_request_line(scorer_, line);
                resp.push_back('\n');
                if (!send_all(fd, resp)) {
                    ::close(fd);
                    forget(fd);
                    return;
                }
            }
            // Oversized single line without a newline: reject early instead of
            // buffering without bound (base64 of the 64 MB cap plus headroom).
            if (buffer.size() > (kMaxInlinePayloadBytes / 3 + 1) * 4 + 4096) {
                std::string resp =
                    std::string("{\"id\":\"\",\"error\":\"request line exceeds the 64 MB "
                                "inline payload limit\"}\n");
                send_all(fd, resp);
                break;
            }
        }
        ::close(fd);
        forget(fd);
    }

    static bool send_all(int fd, const std::string& data) {
        size_t sent = 0;
        while (sent < data.size()) {
            const ssize_t n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
            if (n <= 0) return false;
            sent += static_cast<size_t>(n);
        }
        return true;
    }

    void forget(int fd) {
        std::lock_guard<std::mutex> lk(mu_);
        open_fds_.erase(fd);
    }

    void shutdown_connections() {
        std::lock_guard<std::mutex> lk(mu_);
        for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
    }

    Scorer scorer_;
    int listen_fd_ = -1;
    int port_ = 0;
    std::atomic<bool> stop_requested_{false};
    std::mutex mu_;
    std::set<int> open_fds_;
    std::vector<std::thread> workers_;
    std::thread accept_thread_;
};

// --- minimal blocking client (tests and the CLI's `score --server` path) ---

class Client {
public:
    Client(const std::string& host, int port) {
        fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd_ < 0) throw std::runtime_error("socket() failed");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(static_cast<uint16_t>(port));
        if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
            throw ConfigError("invalid host " + host);
        if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
            throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));
    }
    ~Client() {
        if (fd_ >= 0) ::close(fd_);
    }
    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    void send_line(const std::string& line) {
        std::string data = line;
        data.push_back('\n');
        size_t sent = 0;
        while (sent < data.size()) {
            const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
            if (n <= 0) throw std::runtime_error("send failed");
            sent += static_cast<size_t>(n);
        }
    }

    std::string recv_line() {
        size_t pos;
        while ((pos = buffer_.find('\n')) == std::string::npos) {
            char chunk[4096];
            const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
            if (n <= 0) throw std::runtime_error("connection closed while waiting for response");
            buffer_.append(chunk, static_cast<size_t>(n));
        }
        std::string line = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        return line;
    }

    std::string round_trip(const std::string& line) {
        send_line(line);
        return recv_line();
    }

private:
    int fd_ = -1;
    std::string buffer_;
};

}  // namespace lsp::service
