// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace ckm {

// Process exit codes, shared between library errors and the CLI.
enum class Errc : int {
    usage   = 2,
    data    = 3,
    network = 4,
    numeric = 5,
};

class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    Errc code() const { return code_; }

  private:
    Errc code_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(Errc::usage, msg); }
[[noreturn]] inline void fail_data(const std::string& msg) { throw Error(Errc::data, msg); }
[[noreturn]] inline void fail_network(const std::string& msg) { throw Error(Errc::network, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) { throw Error(Errc::numeric, msg); }

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel : int { debug = 0, info = 1, warn = 2, error = 3 };

void set_log_level(LogLevel lvl);
LogLevel log_level();
LogLevel parse_log_level(const std::string& name);

void log_msg(LogLevel lvl, const char* fmt, ...)
#if defined(__GNUC__)
    __attribute__((format(printf, 2, 3)))
#endif
    ;

#define CKM_LOG_DEBUG(...) ::ckm::log_msg(::ckm::LogLevel::debug, __VA_ARGS__)
#define CKM_LOG_INFO(...) ::ckm::log_msg(::ckm::LogLevel::info, __VA_ARGS__)
#define CKM_LOG_WARN(...) ::ckm::log_msg(::ckm::LogLevel::warn, __VA_ARGS__)
#define CKM_LOG_ERROR(...) ::ckm::log_msg(::ckm::LogLevel::error, __VA_ARGS__)

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// std::normal_distribution is implementation-defined, so normal draws go
// through an explicit Box-Muller transform to keep outputs identical across
// standard libraries.

class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive range
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(next_u64() % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(float* p, size_t n) {
        for (size_t k = 0; k < n; ++k) p[k] = static_cast<float>(normal());
    }

  private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Stable per-stream seed derivation (splitmix64 over base ^ stream tag).
uint64_t derive_seed(uint64_t base, uint64_t stream);

// ---------------------------------------------------------------------------
// Little-endian byte buffers for the binary file formats and wire frames.

class ByteWriter {
  public:
    void put_u8(uint8_t v) { buf_.push_back(v); }
    void put_u16(uint16_t v) {
        buf_.push_back(static_cast<uint8_t>(v));
        buf_.push_back(static_cast<uint8_t>(v >> 8));
    }
    void put_u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void put_u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void put_f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(bits);
    }
    void put_bytes(const void* p, size_t n) {
        const uint8_t* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void put_string(const std::string& s) { put_bytes(s.data(), s.size()); }

    const std::vector<uint8_t>& bytes() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

  private:
    std::vector<uint8_t> buf_;
};

class ByteReader {
  public:
    ByteReader(const uint8_t* p, size_t n) : p_(p), n_(n) {}
    explicit ByteReader(const std::vector<uint8_t>& v) : p_(v.data()), n_(v.size()) {}

    size_t pos() const { return pos_; }
    size_t remaining() const { return n_ - pos_; }

    uint8_t get_u8() {
        need(1);
        return p_[pos_++];
    }
    uint16_t get_u16() {
        need(2);
        uint16_t v = static_cast<uint16_t>(p_[pos_] | (p_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }
    uint32_t get_u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    uint64_t get_u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float get_f32() {
        uint32_t bits = get_u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    void get_bytes(void* dst, size_t n) {
        need(n);
        std::memcpy(dst, p_ + pos_, n);
        pos_ += n;
    }
    std::string get_string(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
        pos_ += n;
        return s;
    }

  private:
    void need(size_t n) const {
        if (pos_ + n > n_) fail_data("truncated input: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_));
    }
    const uint8_t* p_;
    size_t n_;
    size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Minimal fork/join over index ranges. Static partition, so work assignment
// is independent of scheduling; callers get determinism by accumulating
// per-chunk results in index order.
void parallel_chunks(size_t n_items, int n_threads, const std::function<void(size_t, size_t, int)>& fn);

int hardware_threads();

// ---------------------------------------------------------------------------
// Filesystem helpers

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const void* data, size_t n);
// write to <path>.tmp.<pid> then rename, so concurrent readers never see partial files
void write_file_atomic(const std::string& path, const void* data, size_t n);
bool file_exists(const std::string& path);
void make_dirs(const std::string& path);

// Digests
std::string sha256_hex(const void* data, size_t n);
uint32_t crc32_of(const void* data, size_t n);

}  // namespace ckm
