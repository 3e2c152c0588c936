// SPDX-License-Identifier: Apache-2.0
//
// Cloud-side model registry + serving endpoint and the edge client:
// versioned weight distribution over the CKMP length-prefixed frame
// protocol, content-hash verified, cached by hash at the edge.
#pragma once

#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ckm/posterior.hpp"

namespace ckm {

struct ModelManifest {
    std::string version;
    std::string arch;
    int n_timesteps = 0;
    double beta_min = 0.0, beta_max = 0.0;
    uint64_t payload_bytes = 0;
    std::string sha256;
    int64_t published_at = 0;  // unix seconds

    nlohmann::json to_json() const;
    static ModelManifest from_json(const nlohmann::json& j);
};

// Directory-backed ordered map version -> (manifest, payload). Reads are
// concurrent; publish is single-writer. Payload hashes are re-verified on
// open.
class Registry {
  public:
    static std::shared_ptr<Registry> open(const std::string& dir);  // creates when absent

    ModelManifest publish(const std::string& weights_path, const std::string& version,
                          std::optional<int64_t> timestamp = std::nullopt);
    std::vector<ModelManifest> list() const;  // publish order
    std::optional<ModelManifest> find(const std::string& version_or_latest) const;
    std::string payload_path(const ModelManifest& m) const;
    std::string current_version() const;

  private:
    explicit Registry(std::string dir) : dir_(std::move(dir)) {}
    void load_and_verify();
    void persist_locked() const;

    std::string dir_;
    std::vector<ModelManifest> manifests_;
    std::string current_;
    mutable std::shared_mutex mu_;
};

// ---------------------------------------------------------------------------
// CKMP frames: u32 magic 0x434B4D50 | u8 type | u32 payload len | payload,
// integers little-endian, one request per frame, responses in order.

namespace ckmp {
inline constexpr uint32_t kMagic = 0x434B4D50;
inline constexpr uint8_t kListReq = 0x01;
inline constexpr uint8_t kListResp = 0x02;
inline constexpr uint8_t kGetManifest = 0x03;
inline constexpr uint8_t kManifest = 0x04;
inline constexpr uint8_t kGetWeights = 0x05;
inline constexpr uint8_t kWeights = 0x06;
inline constexpr uint8_t kError = 0x7F;
inline constexpr uint32_t kMaxPayload = 256u << 20;
}  // namespace ckmp

class Server {
  public:
    ~Server();
    uint16_t port() const { return port_; }
    void stop();

  private:
    friend std::unique_ptr<Server> serve(std::shared_ptr<Registry>, const std::string&);
    Server() = default;
    struct Impl;
    std::unique_ptr<Impl> impl_;
    uint16_t port_ = 0;
};

// bind_address is "host:port"; port 0 binds an ephemeral port (see port()).
std::unique_ptr<Server> serve(std::shared_ptr<Registry> registry, const std::string& bind_address);

struct FetchStats {
    uint64_t bytes_sent = 0;
    uint64_t bytes_received = 0;
    bool payload_transferred = false;
    bool offline_cache_hit = false;
};

struct FetchResult {
    std::string path;  // verified payload in the cache
    ModelManifest manifest;
    FetchStats stats;
};

// Cache layout: <cache_dir>/payloads/<sha256>.ckmw plus per-version manifest
// JSON (and a "latest" alias) enabling offline reuse. A cached payload is
// served without any weight transfer; a hash mismatch on download discards
// the payload and leaves the cache untouched.
FetchResult fetch_model(const std::string& address, const std::string& version_or_latest,
                        const std::string& cache_dir);

std::string default_cache_dir();  // honors CKM_CACHE_DIR

struct EdgeResult {
    std::string result_path;
    std::string sidecar_path;
    FetchStats fetch_stats;
    ConstructionResult construction;
};

// Fetch (or reuse cached) weights, run posterior construction on a stored
// observation, write the CKMG result + JSON sidecar. operator_json_text may
// be empty to use the operator embedded in the observation file.
EdgeResult edge_construct(const std::string& address, const std::string& version_or_latest,
                          const std::string& observation_path, const std::string& operator_json_text,
                          const PosteriorConfig& cfg, const std::string& cache_dir,
                          const std::string& out_path);

// Shared by edge_construct and the local-weights CLI path.
EdgeResult construct_to_files(const ScoreNetParams& params, const Observation& obs,
                              const PosteriorConfig& cfg, const std::string& out_path);

}  // namespace ckm
