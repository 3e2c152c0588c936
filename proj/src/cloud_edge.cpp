// SPDX-License-Identifier: Apache-2.0
#include "ckm/cloud_edge.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <mutex>
#include <set>
#include <thread>

namespace ckm {

// ---------------------------------------------------------------------------
// Manifest / registry

nlohmann::json ModelManifest::to_json() const {
    return {
        {"version", version},       {"arch", arch},
        {"N", n_timesteps},         {"beta_min", beta_min},
        {"beta_max", beta_max},     {"payload_bytes", payload_bytes},
        {"sha256", sha256},         {"published_at", published_at},
    };
}

ModelManifest ModelManifest::from_json(const nlohmann::json& j) {
    ModelManifest m;
    try {
        m.version = j.at("version").get<std::string>();
        m.arch = j.at("arch").get<std::string>();
        m.n_timesteps = j.at("N").get<int>();
        m.beta_min = j.at("beta_min").get<double>();
        m.beta_max = j.at("beta_max").get<double>();
        m.payload_bytes = j.at("payload_bytes").get<uint64_t>();
        m.sha256 = j.at("sha256").get<std::string>();
        m.published_at = j.at("published_at").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        fail_data(std::string("manifest JSON: ") + e.what());
    }
    return m;
}

std::shared_ptr<Registry> Registry::open(const std::string& dir) {
    auto r = std::shared_ptr<Registry>(new Registry(dir));
    make_dirs(dir);
    make_dirs(dir + "/payloads");
    r->load_and_verify();
    return r;
}

void Registry::load_and_verify() {
    const std::string index = dir_ + "/registry.json";
    if (!file_exists(index)) return;  // fresh registry
    const std::vector<uint8_t> bytes = read_file(index);
    nlohmann::json j = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (j.is_discarded()) fail_data("registry.json: parse error");
    try {
        current_ = j.at("current").get<std::string>();
        for (const auto& mj : j.at("models")) manifests_.push_back(ModelManifest::from_json(mj));
    } catch (const nlohmann::json::exception& e) {
        fail_data(std::string("registry.json: ") + e.what());
    }
    for (const auto& m : manifests_) {
        const std::string path = payload_path(m);
        const std::vector<uint8_t> payload = read_file(path);
        if (payload.size() != m.payload_bytes || sha256_hex(payload.data(), payload.size()) != m.sha256)
            fail_data("registry payload failed hash verification: " + path);
    }
}

void Registry::persist_locked() const {
    nlohmann::json j;
    j["current"] = current_;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : manifests_) arr.push_back(m.to_json());
    j["models"] = arr;
    const std::string text = j.dump(2) + "\n";
    write_file_atomic(dir_ + "/registry.json", text.data(), text.size());
}

std::string Registry::payload_path(const ModelManifest& m) const {
    return dir_ + "/payloads/" + m.version + ".ckmw";
}

ModelManifest Registry::publish(const std::string& weights_path, const std::string& version,
                                std::optional<int64_t> timestamp) {
    if (version.empty() || version == "latest") fail_usage("publish: invalid version name '" + version + "'");
    const std::vector<uint8_t> payload = read_file(weights_path);
    // full parse: corrupt or mismatched weights never enter the registry
    const ScoreNetParams params = decode_weights(payload.data(), payload.size());

    std::unique_lock lk(mu_);
    for (const auto& m : manifests_)
        if (m.version == version) fail_data("publish: version '" + version + "' already present");

    ModelManifest m;
    m.version = version;
    m.arch = params.arch.to_string();
    m.n_timesteps = params.n_timesteps;
    m.beta_min = params.beta_min;
    m.beta_max = params.beta_max;
    m.payload_bytes = payload.size();
    m.sha256 = sha256_hex(payload.data(), payload.size());
    m.published_at = timestamp.value_or(static_cast<int64_t>(::time(nullptr)));

    write_file_atomic(payload_path(m), payload.data(), payload.size());
    manifests_.push_back(m);
    current_ = version;
    persist_locked();
    return m;
}

std::vector<ModelManifest> Registry::list() const {
    std::shared_lock lk(mu_);
    return manifests_;
}

std::optional<ModelManifest> Registry::find(const std::string& version_or_latest) const {
    std::shared_lock lk(mu_);
    const std::string& want = version_or_latest == "latest" ? current_ : version_or_latest;
    for (const auto& m : manifests_)
        if (m.version == want) return m;
    return std::nullopt;
}

std::string Registry::current_version() const {
    std::shared_lock lk(mu_);
    return current_;
}

// ---------------------------------------------------------------------------
// Frame I/O over counting sockets

namespace {

struct CountingSocket {
    int fd = -1;
    uint64_t sent = 0;
    uint64_t received = 0;

    ~CountingSocket() { close_fd(); }
    void close_fd() {
        if (fd >= 0) ::close(fd);
        fd = -1;
    }

    void send_all(const void* data, size_t n) {
        const uint8_t* p = static_cast<const uint8_t*>(data);
        while (n > 0) {
            const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
            if (k <= 0) fail_network(std::string("send failed: ") + std::strerror(errno));
            p += k;
            n -= static_cast<size_t>(k);
            sent += static_cast<uint64_t>(k);
        }
    }

    // false on clean EOF at a frame boundary
    bool recv_all(void* data, size_t n, bool eof_ok) {
        uint8_t* p = static_cast<uint8_t*>(data);
        size_t got = 0;
        while (got < n) {
            const ssize_t k = ::recv(fd, p + got, n - got, 0);
            if (k == 0) {
                if (eof_ok && got == 0) return false;
                fail_network("connection closed mid-frame");
            }
            if (k < 0) fail_network(std::string("recv failed: ") + std::strerror(errno));
            got += static_cast<size_t>(k);
            received += static_cast<uint64_t>(k);
        }
        return true;
    }
};

struct Frame {
    uint8_t type = 0;
    std::vector<uint8_t> payload;
};

void send_frame(CountingSocket& s, uint8_t type, const void* payload, size_t n) {
    if (n > ckmp::kMaxPayload) fail_network("frame payload exceeds 256 MiB cap");
    ByteWriter w;
    w.put_u32(ckmp::kMagic);
    w.put_u8(type);
    w.put_u32(static_cast<uint32_t>(n));
    s.send_all(w.bytes().data(), w.size());
    if (n > 0) s.send_all(payload, n);
}

void send_frame(CountingSocket& s, uint8_t type, const std::string& text) {
    send_frame(s, type, text.data(), text.size());
}

bool recv_frame(CountingSocket& s, Frame& f, bool eof_ok) {
    uint8_t header[9];
    if (!s.recv_all(header, sizeof header, eof_ok)) return false;
    ByteReader r(header, sizeof header);
    if (r.get_u32() != ckmp::kMagic) fail_network("bad frame magic");
    f.type = r.get_u8();
    const uint32_t len = r.get_u32();
    if (len > ckmp::kMaxPayload) fail_network("frame payload exceeds 256 MiB cap");
    f.payload.resize(len);
    if (len > 0) s.recv_all(f.payload.data(), len, false);
    return true;
}

std::string payload_text(const Frame& f) {
    return std::string(reinterpret_cast<const char*>(f.payload.data()), f.payload.size());
}

void split_address(const std::string& address, std::string& host, std::string& port) {
    const size_t colon = address.rfind(':');
    if (colon == std::string::npos) fail_usage("address must be host:port, got '" + address + "'");
    host = address.substr(0, colon);
    port = address.substr(colon + 1);
    if (host.empty()) host = "127.0.0.1";
}

}  // namespace

// ---------------------------------------------------------------------------
// Server

struct Server::Impl {
    std::shared_ptr<Registry> registry;
    int listen_fd = -1;
    std::thread accept_thread;
    std::vector<std::thread> workers;
    std::mutex mu;
    std::set<int> open_fds;
    std::atomic<bool> stopping{false};

    void track(int fd) {
        std::lock_guard lk(mu);
        open_fds.insert(fd);
    }
    void untrack(int fd) {
        std::lock_guard lk(mu);
        open_fds.erase(fd);
    }

    void handle(int fd) {
        CountingSocket sock;
        sock.fd = fd;
        track(fd);
        try {
            Frame f;
            while (!stopping.load() && recv_frame(sock, f, true)) {
                switch (f.type) {
                    case ckmp::kListReq: {
                        nlohmann::json arr = nlohmann::json::array();
                        for (const auto& m : registry->list()) arr.push_back(m.to_json());
                        send_frame(sock, ckmp::kListResp, arr.dump());
                        break;
                    }
                    case ckmp::kGetManifest: {
                        const auto m = registry->find(payload_text(f));
                        if (m)
                            send_frame(sock, ckmp::kManifest, m->to_json().dump());
                        else
                            send_frame(sock, ckmp::kError, std::string("unknown version"));
                        break;
                    }
                    case ckmp::kGetWeights: {
                        const auto m = registry->find(payload_text(f));
                        if (!m) {
                            send_frame(sock, ckmp::kError, std::string("unknown version"));
                            break;
                        }
                        const std::vector<uint8_t> payload = read_file(registry->payload_path(*m));
                        send_frame(sock, ckmp::kWeights, payload.data(), payload.size());
                        break;
                    }
                    default:
                        send_frame(sock, ckmp::kError, std::string("unexpected frame type"));
                        break;
                }
            }
        } catch (const std::exception& e) {
            if (!stopping.load()) CKM_LOG_DEBUG("connection closed: %s", e.what());
        }
        untrack(fd);
        // CountingSocket closes fd
    }

    void accept_loop() {
        while (!stopping.load()) {
            sockaddr_in peer{};
            socklen_t len = sizeof peer;
            const int fd = ::accept(listen_fd, reinterpret_cast<sockaddr*>(&peer), &len);
            if (fd < 0) {
                if (stopping.load()) break;
                if (errno == EINTR) continue;
                CKM_LOG_WARN("accept failed: %s", std::strerror(errno));
                break;
            }
            std::lock_guard lk(mu);
            workers.emplace_back([this, fd] { handle(fd); });
        }
    }

    void stop() {
        if (stopping.exchange(true)) return;
        if (listen_fd >= 0) {
            ::shutdown(listen_fd, SHUT_RDWR);
            ::close(listen_fd);
            listen_fd = -1;
        }
        {
            std::lock_guard lk(mu);
            for (int fd : open_fds) ::shutdown(fd, SHUT_RDWR);
        }
        if (accept_thread.joinable()) accept_thread.join();
        std::vector<std::thread> ws;
        {
            std::lock_guard lk(mu);
            ws.swap(workers);
        }
        for (auto& w : ws)
            if (w.joinable()) w.join();
    }
};

Server::~Server() { stop(); }

void Server::stop() {
    if (impl_) impl_->stop();
}

std::unique_ptr<Server> serve(std::shared_ptr<Registry> registry, const std::string& bind_address) {
    std::string host, port;
    split_address(bind_address, host, port);

    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) fail_network(std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);

    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(std::stoi(port)));
    if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
        ::close(fd);
        fail_usage("serve: bad bind host '" + host + "'");
    }
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        const std::string msg = std::strerror(errno);
        ::close(fd);
        fail_network("bind " + bind_address + ": " + msg);
    }
    if (::listen(fd, 64) != 0) {
        const std::string msg = std::strerror(errno);
        ::close(fd);
        fail_network("listen: " + msg);
    }
    sockaddr_in bound{};
    socklen_t blen = sizeof bound;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&bound), &blen);

    auto server = std::unique_ptr<Server>(new Server());
    server->impl_ = std::make_unique<Server::Impl>();
    server->impl_->registry = std::move(registry);
    server->impl_->listen_fd = fd;
    server->port_ = ntohs(bound.sin_port);
    Server::Impl* impl = server->impl_.get();
    impl->accept_thread = std::thread([impl] { impl->accept_loop(); });
    return server;
}

// ---------------------------------------------------------------------------
// Client

namespace {

int connect_to(const std::string& address) {
    std::string host, port;
    split_address(address, host, port);
    if (host == "localhost") host = "127.0.0.1";

    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res);
    if (rc != 0) fail_network("resolve " + address + ": " + gai_strerror(rc));
    int fd = -1;
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) fail_network("cannot connect to " + address);
    return fd;
}

ModelManifest request_manifest(CountingSocket& sock, const std::string& version) {
    send_frame(sock, ckmp::kGetManifest, version);
    Frame f;
    if (!recv_frame(sock, f, false)) fail_network("server closed connection");
    if (f.type == ckmp::kError) fail_network("server error: " + payload_text(f));
    if (f.type != ckmp::kManifest) fail_network("protocol violation: expected MANIFEST frame");
    nlohmann::json j = nlohmann::json::parse(payload_text(f), nullptr, false);
    if (j.is_discarded()) fail_network("protocol violation: manifest is not valid JSON");
    return ModelManifest::from_json(j);
}

std::string cache_payload_path(const std::string& cache_dir, const std::string& sha) {
    return cache_dir + "/payloads/" + sha + ".ckmw";
}

std::string cache_manifest_path(const std::string& cache_dir, const std::string& version) {
    return cache_dir + "/manifests/" + version + ".json";
}

void cache_store_manifest(const std::string& cache_dir, const std::string& requested,
                          const ModelManifest& m) {
    const std::string text = m.to_json().dump();
    write_file_atomic(cache_manifest_path(cache_dir, m.version), text.data(), text.size());
    if (requested == "latest") write_file_atomic(cache_manifest_path(cache_dir, "latest"), text.data(), text.size());
}

}  // namespace

std::string default_cache_dir() {
    if (const char* env = std::getenv("CKM_CACHE_DIR")) return env;
    if (const char* home = std::getenv("HOME")) return std::string(home) + "/.cache/ckm";
    return "./.ckm-cache";
}

FetchResult fetch_model(const std::string& address, const std::string& version_or_latest,
                        const std::string& cache_dir) {
    make_dirs(cache_dir + "/payloads");
    make_dirs(cache_dir + "/manifests");

    FetchResult out;
    CountingSocket sock;
    try {
        sock.fd = connect_to(address);
    } catch (const Error&) {
        // offline: serve from the cache if this version was seen before
        const std::string mpath = cache_manifest_path(cache_dir, version_or_latest);
        if (!file_exists(mpath)) throw;
        const std::vector<uint8_t> mbytes = read_file(mpath);
        nlohmann::json j = nlohmann::json::parse(mbytes.begin(), mbytes.end(), nullptr, false);
        if (j.is_discarded()) throw;
        out.manifest = ModelManifest::from_json(j);
        const std::string ppath = cache_payload_path(cache_dir, out.manifest.sha256);
        if (!file_exists(ppath)) throw;
        out.path = ppath;
        out.stats.offline_cache_hit = true;
        CKM_LOG_INFO("offline: using cached %s (%s)", out.manifest.version.c_str(),
                     out.manifest.sha256.substr(0, 12).c_str());
        return out;
    }

    out.manifest = request_manifest(sock, version_or_latest);
    const std::string ppath = cache_payload_path(cache_dir, out.manifest.sha256);
    if (!file_exists(ppath)) {
        send_frame(sock, ckmp::kGetWeights, out.manifest.version);
        Frame f;
        if (!recv_frame(sock, f, false)) fail_network("server closed connection");
        if (f.type == ckmp::kError) fail_network("server error: " + payload_text(f));
        if (f.type != ckmp::kWeights) fail_network("protocol violation: expected WEIGHTS frame");
        const std::string got = sha256_hex(f.payload.data(), f.payload.size());
        if (got != out.manifest.sha256)
            fail_data("weights hash mismatch for version '" + out.manifest.version + "' (got " + got +
                      ", manifest says " + out.manifest.sha256 + "); payload discarded");
        write_file_atomic(ppath, f.payload.data(), f.payload.size());
        out.stats.payload_transferred = true;
    }
    cache_store_manifest(cache_dir, version_or_latest, out.manifest);
    out.path = ppath;
    out.stats.bytes_sent = sock.sent;
    out.stats.bytes_received = sock.received;
    return out;
}

// ---------------------------------------------------------------------------
// Edge construction

EdgeResult construct_to_files(const ScoreNetParams& params, const Observation& obs,
                              const PosteriorConfig& cfg, const std::string& out_path) {
    const NoiseSchedule sched = params.schedule();
    ConstructionResult res = dps_sample(params, sched, obs, cfg);

    std::vector<uint8_t> building = obs.building;
    if (building.empty()) building.assign(static_cast<size_t>(obs.grid_h) * obs.grid_w, 0);
    const CkmGrid grid = tensor_to_grid(res.x_hat, building);
    save_grid(grid, out_path);

    nlohmann::json sidecar = {
        {"residual_trace", res.residual_trace},
        {"config", res.config_echo},
        {"runtime_ms", res.runtime_ms},
    };
    const std::string sidecar_path = out_path + ".json";
    const std::string text = sidecar.dump(2) + "\n";
    write_file(sidecar_path, text.data(), text.size());

    EdgeResult out;
    out.result_path = out_path;
    out.sidecar_path = sidecar_path;
    out.construction = std::move(res);
    return out;
}

EdgeResult edge_construct(const std::string& address, const std::string& version_or_latest,
                          const std::string& observation_path, const std::string& operator_json_text,
                          const PosteriorConfig& cfg, const std::string& cache_dir,
                          const std::string& out_path) {
    const FetchResult fetched = fetch_model(address, version_or_latest, cache_dir);

    // integrity gate: nothing with a mismatched hash is ever loaded
    const std::vector<uint8_t> payload = read_file(fetched.path);
    if (payload.size() != fetched.manifest.payload_bytes ||
        sha256_hex(payload.data(), payload.size()) != fetched.manifest.sha256)
        fail_data("cached weights failed hash verification: " + fetched.path);
    const ScoreNetParams params = decode_weights(payload.data(), payload.size());

    Observation obs = load_observation(observation_path);
    if (!operator_json_text.empty()) {
        ForwardOp op = ForwardOp::from_json_text(operator_json_text);
        if (op.needs_building()) {
            if (obs.building.empty())
                fail_data("operator requires a building plane but the observation has none");
            op.set_building(obs.building, obs.grid_h, obs.grid_w);
        }
        obs.op = std::move(op);
    }

    EdgeResult out = construct_to_files(params, obs, cfg, out_path);
    out.fetch_stats = fetched.stats;
    return out;
}

}  // namespace ckm
