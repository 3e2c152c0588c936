// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <thread>

#include "ckm/cloud_edge.hpp"
#include "oracles.hpp"

using namespace ckm;

namespace {

ScoreNetParams tiny_weights(uint64_t seed = 3) {
    ArchDesc a;
    a.base_width = 8;
    a.mults = {1, 1};
    a.temb_dim = 8;
    return init_params(a, 20, 0.05, 0.4, seed);
}

std::string write_tiny_weights(const oracles::TempDir& dir, const std::string& name,
                               uint64_t seed = 3) {
    const std::string path = dir.file(name);
    save_weights(tiny_weights(seed), path);
    return path;
}

// One-connection TCP proxy that XOR-corrupts a single byte of the
// server->client stream at `corrupt_offset`.
struct CorruptingProxy {
    int listen_fd = -1;
    uint16_t port = 0;
    std::string upstream;
    size_t corrupt_offset;
    std::thread thread;

    CorruptingProxy(const std::string& upstream_addr, size_t offset)
        : upstream(upstream_addr), corrupt_offset(offset) {
        listen_fd = ::socket(AF_INET, SOCK_STREAM, 0);
        REQUIRE(listen_fd >= 0);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        REQUIRE(::bind(listen_fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
        REQUIRE(::listen(listen_fd, 1) == 0);
        sockaddr_in bound{};
        socklen_t blen = sizeof bound;
        ::getsockname(listen_fd, reinterpret_cast<sockaddr*>(&bound), &blen);
        port = ntohs(bound.sin_port);
        thread = std::thread([this] { run(); });
    }

    ~CorruptingProxy() {
        if (listen_fd >= 0) ::close(listen_fd);
        if (thread.joinable()) thread.join();
    }

    void run() {
        const int client = ::accept(listen_fd, nullptr, nullptr);
        if (client < 0) return;
        const size_t colon = upstream.rfind(':');
        const int server = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in up{};
        up.sin_family = AF_INET;
        up.sin_port = htons(static_cast<uint16_t>(std::stoi(upstream.substr(colon + 1))));
        ::inet_pton(AF_INET, "127.0.0.1", &up.sin_addr);
        if (::connect(server, reinterpret_cast<sockaddr*>(&up), sizeof up) != 0) {
            ::close(client);
            ::close(server);
            return;
        }
        std::atomic<bool> done{false};
        std::thread upstream_pump([&] {
            char buf[4096];
            ssize_t n;
            while ((n = ::recv(client, buf, sizeof buf, 0)) > 0)
                if (::send(server, buf, static_cast<size_t>(n), MSG_NOSIGNAL) <= 0) break;
            ::shutdown(server, SHUT_WR);
            done = true;
        });
        size_t pos = 0;
        char buf[4096];
        ssize_t n;
        while ((n = ::recv(server, buf, sizeof buf, 0)) > 0) {
            if (corrupt_offset >= pos && corrupt_offset < pos + static_cast<size_t>(n))
                buf[corrupt_offset - pos] ^= 0x20;
            pos += static_cast<size_t>(n);
            if (::send(client, buf, static_cast<size_t>(n), MSG_NOSIGNAL) <= 0) break;
        }
        ::shutdown(client, SHUT_WR);
        upstream_pump.join();
        ::close(client);
        ::close(server);
    }
};

}  // namespace

TEST_SUITE_BEGIN("cloud_edge");

TEST_CASE("registry publish: ordering, duplicates, hash oracle") {
    oracles::TempDir dir("registry");
    const std::string w1 = write_tiny_weights(dir, "a.ckmw", 1);
    const std::string w2 = write_tiny_weights(dir, "b.ckmw", 2);

    auto reg = Registry::open(dir.file("reg"));
    const ModelManifest m1 = reg->publish(w1, "v1", 1000);
    const ModelManifest m2 = reg->publish(w2, "v2", 2000);

    const auto listed = reg->list();
    REQUIRE(listed.size() == 2);
    CHECK(listed[0].version == "v1");
    CHECK(listed[1].version == "v2");
    CHECK(reg->current_version() == "v2");
    CHECK(reg->find("latest")->version == "v2");
    CHECK(reg->find("v1")->sha256 == m1.sha256);
    CHECK(!reg->find("v9").has_value ());

    CHECK_THROWS_AS(reg->publish(w1, "v1"), Error);  // duplicate version

    // manifest hash equals an independently computed SHA-256 of the payload
    const std::string cmd = "sha256sum '" + reg->payload_path(m2) + "'";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char hex[65] = {0};
    REQUIRE(fscanf(pipe, "%64s", hex) == 1);
    pclose(pipe);
    CHECK(m2.sha256 == std::string(hex));

    // reopening verifies payloads; a corrupted payload is rejected
    {
        auto reopened = Registry::open(dir.file("reg"));
        CHECK(reopened->list().size() == 2);
    }
    std::vector<uint8_t> payload = read_file(reg->payload_path(m1));
    payload[payload.size() / 2] ^= 0xFF;
    write_file(reg->payload_path(m1), payload.data(), payload.size());
    CHECK_THROWS_AS(Registry::open(dir.file("reg")), Error);
}

TEST_CASE("publish rejects corrupt weight files") {
    oracles::TempDir dir("pubbad");
    const std::string w = write_tiny_weights(dir, "w.ckmw");
    std::vector<uint8_t> bytes = read_file(w);
    bytes[bytes.size() / 2] ^= 0x01;
    const std::string bad = dir.file("bad.ckmw");
    write_file(bad, bytes.data(), bytes.size());
    auto reg = Registry::open(dir.file("reg"));
    CHECK_THROWS_AS(reg->publish(bad, "v1"), Error);
}

TEST_CASE("serve + fetch: round trip, cache hits, manifest-only refresh") {
    oracles::TempDir dir("fetch");
    const std::string w = write_tiny_weights(dir, "w.ckmw");
    auto reg = Registry::open(dir.file("reg"));
    reg->publish(w, "v1", 1234);
    auto server = serve(reg, "127.0.0.1:0");
    const std::string addr = "127.0.0.1:" + std::to_string(server->port());
    const std::string cache = dir.file("cache");

    const FetchResult first = fetch_model(addr, "latest", cache);
    CHECK(first.manifest.version == "v1");
    CHECK(first.stats.payload_transferred);
    CHECK(read_file(first.path) == read_file(w));

    const FetchResult second = fetch_model(addr, "latest", cache);
    CHECK_FALSE(second.stats.payload_transferred);
    CHECK(second.stats.bytes_received < 1024);  // manifest-only exchange
    CHECK(second.path == first.path);

    // n fetches leave exactly one cached payload
    const FetchResult third = fetch_model(addr, "v1", cache);
    CHECK_FALSE(third.stats.payload_transferred);
    size_t payload_files = 0;
    for (const auto& e : std::filesystem::directory_iterator(cache + "/payloads")) {
        (void)e;
        ++payload_files;
    }
    CHECK(payload_files == 1);

    CHECK_THROWS_AS(fetch_model(addr, "v7", cache), Error);  // unknown version

    server->stop();
}

TEST_CASE("eight concurrent fetches see byte-identical weights; server state unchanged") {
    oracles::TempDir dir("conc");
    const std::string w = write_tiny_weights(dir, "w.ckmw");
    auto reg = Registry::open(dir.file("reg"));
    reg->publish(w, "v1", 1);
    const auto before = reg->list();
    auto server = serve(reg, "127.0.0.1:0");
    const std::string addr = "127.0.0.1:" + std::to_string(server->port());

    const std::vector<uint8_t> expect = read_file(w);
    std::vector<std::thread> clients;
    std::vector<int> ok(8, 0);
    for (int k = 0; k < 8; ++k) {
        clients.emplace_back([&, k] {
            const std::string cache = dir.file("cache_" + std::to_string(k));
            const FetchResult res = fetch_model(addr, "v1", cache);
            ok[k] = read_file(res.path) == expect ? 1 : 0;
        });
    }
    for (auto& c : clients) c.join();
    for (int k = 0; k < 8; ++k) CHECK(ok[k] == 1);

    const auto after = reg->list();
    REQUIRE(after.size() == before.size());
    CHECK(after[0].sha256 == before[0].sha256);
    CHECK(reg->current_version() == "v1");
    server->stop();
}

TEST_CASE("corrupted payload is rejected by the hash check and never cached") {
    oracles::TempDir dir("fault");
    const std::string w = write_tiny_weights(dir, "w.ckmw");
    auto reg = Registry::open(dir.file("reg"));
    reg->publish(w, "v1", 1);
    auto server = serve(reg, "127.0.0.1:0");

    CorruptingProxy proxy("127.0.0.1:" + std::to_string(server->port()), 5000);
    const std::string cache = dir.file("cache");
    CHECK_THROWS_WITH_AS(fetch_model("127.0.0.1:" + std::to_string(proxy.port), "v1", cache),
                         doctest::Contains("hash mismatch"), Error);
    // cache directory exists but must hold no payload
    size_t files = 0;
    if (std::filesystem::exists(cache + "/payloads"))
        for (const auto& e : std::filesystem::directory_iterator(cache + "/payloads")) {
            (void)e;
            ++files;
        }
    CHECK(files == 0);
    server->stop();
}

TEST_CASE("offline behavior: warm cache serves, cold cache raises a network error") {
    oracles::TempDir dir("offline");
    const std::string w = write_tiny_weights(dir, "w.ckmw");
    auto reg = Registry::open(dir.file("reg"));
    reg->publish(w, "v1", 1);
    auto server = serve(reg, "127.0.0.1:0");
    const std::string addr = "127.0.0.1:" + std::to_string(server->port());
    const std::string cache = dir.file("cache");

    fetch_model(addr, "latest", cache);
    const uint16_t dead_port = server->port();
    server->stop();

    const std::string dead = "127.0.0.1:" + std::to_string(dead_port);
    const FetchResult offline = fetch_model(dead, "latest", cache);
    CHECK(offline.stats.offline_cache_hit);
    CHECK(read_file(offline.path) == read_file(w));

    const std::string cold = dir.file("cold_cache");
    CHECK_THROWS_AS(fetch_model(dead, "latest", cold), Error);
    try {
        fetch_model(dead, "latest", cold);
    } catch (const Error& e) {
        CHECK(e.code() == Errc::network);
    }
}

TEST_CASE("edge_construct: zero-shot operator reuse without re-fetch") {
    oracles::TempDir dir("edge");
    const std::string w = write_tiny_weights(dir, "w.ckmw");
    auto reg = Registry::open(dir.file("reg"));
    reg->publish(w, "v1", 1);
    auto server = serve(reg, "127.0.0.1:0");
    const std::string addr = "127.0.0.1:" + std::to_string(server->port());
    const std::string cache = dir.file("cache");

    const CkmGrid grid = oracles::small_test_grid(16, 60);
    const Observation obs = observe(grid, ForwardOp::mask_box(2, 2, 5, 5), 0.01, 3);
    const std::string obs_path = dir.file("obs.ckmo");
    save_observation(obs, obs_path);

    PosteriorConfig cfg;
    cfg.corrector_steps = 0;
    cfg.zeta = 5.0;
    cfg.seed = 77;

    const EdgeResult r1 = edge_construct(addr, "latest", obs_path, "", cfg, cache, dir.file("out1.ckmg"));
    CHECK(r1.fetch_stats.payload_transferred);
    CHECK(file_exists(r1.result_path));
    CHECK(file_exists(r1.sidecar_path));
    CHECK_NOTHROW(load_grid(r1.result_path));  // emitted grid passes invariants

    // different operator JSON, same cached prior: no weight payload moves
    const EdgeResult r2 = edge_construct(addr, "latest", obs_path,
                                         "{\"kind\":\"mask_random\",\"ratio\":0.2,\"seed\":4}", cfg,
                                         cache, dir.file("out2.ckmg"));
    CHECK_FALSE(r2.fetch_stats.payload_transferred);
    CHECK(r2.fetch_stats.bytes_received < 1024);

    const nlohmann::json sidecar = nlohmann::json::parse(read_file(r1.sidecar_path));
    CHECK(sidecar.contains("residual_trace"));
    CHECK(sidecar.contains("runtime_ms"));
    CHECK(sidecar.at("residual_trace").size() == 20);
    server->stop();
}

TEST_SUITE_END();
