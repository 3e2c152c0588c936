// SPDX-License-Identifier: Apache-2.0
#include "ckm/util.hpp"

#include <openssl/evp.h>
#include <unistd.h>
#include <zlib.h>

#include <atomic>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

namespace ckm {

namespace {
std::atomic<int> g_log_level{static_cast<int>(LogLevel::info)};
}

void set_log_level(LogLevel lvl) { g_log_level.store(static_cast<int>(lvl)); }
LogLevel log_level() { return static_cast<LogLevel>(g_log_level.load()); }

LogLevel parse_log_level(const std::string& name) {
    if (name == "debug") return LogLevel::debug;
    if (name == "info") return LogLevel::info;
    if (name == "warn") return LogLevel::warn;
    if (name == "error") return LogLevel::error;
    fail_usage("unknown log level: " + name);
}

void log_msg(LogLevel lvl, const char* fmt, ...) {
    if (static_cast<int>(lvl) < g_log_level.load()) return;
    static const char* tags[] = {"debug", "info", "warn", "error"};
    std::fprintf(stderr, "[%s] ", tags[static_cast<int>(lvl)]);
    va_list ap;
    va_start(ap, fmt);
    std::vfprintf(stderr, fmt, ap);
    va_end(ap);
    std::fputc('\n', stderr);
}

uint64_t derive_seed(uint64_t base, uint64_t stream) {
    // splitmix64 finalizer over a stream-tagged state
    uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

int hardware_threads() {
    unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<int>(n);
}

void parallel_chunks(size_t n_items, int n_threads, const std::function<void(size_t, size_t, int)>& fn) {
    if (n_threads <= 0) n_threads = hardware_threads();
    if (n_items == 0) return;
    const int t = static_cast<int>(std::min<size_t>(n_threads, n_items));
    if (t <= 1) {
        fn(0, n_items, 0);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(t);
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (int k = 0; k < t; ++k) {
        const size_t begin = n_items * k / t;
        const size_t end = n_items * (k + 1) / t;
        workers.emplace_back([&, begin, end, k] {
            try {
                fn(begin, end, k);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& w : workers) w.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail_data("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    std::streamoff n = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<uint8_t> buf(static_cast<size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) fail_data("cannot read file: " + path);
    return buf;
}

void write_file(const std::string& path, const void* data, size_t n) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail_data("cannot open file for write: " + path);
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    f.flush();
    if (!f) fail_data("cannot write file: " + path);
}

void write_file_atomic(const std::string& path, const void* data, size_t n) {
    std::string tmp = path + ".tmp." + std::to_string(static_cast<unsigned long>(::getpid()));
    write_file(tmp, data, n);
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        fail_data("cannot rename " + tmp + " -> " + path + ": " + ec.message());
    }
}

bool file_exists(const std::string& path) {
    std::error_code ec;
    return std::filesystem::exists(path, ec);
}

void make_dirs(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) fail_data("cannot create directory " + path + ": " + ec.message());
}

std::string sha256_hex(const void* data, size_t n) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int md_len = 0;
    if (EVP_Digest(data, n, md, &md_len, EVP_sha256(), nullptr) != 1)
        fail_data("sha256 digest failed");
    static const char* hexd = "0123456789abcdef";
    std::string out(md_len * 2, '0');
    for (unsigned i = 0; i < md_len; ++i) {
        out[2 * i] = hexd[md[i] >> 4];
        out[2 * i + 1] = hexd[md[i] & 0xf];
    }
    return out;
}

uint32_t crc32_of(const void* data, size_t n) {
    return static_cast<uint32_t>(::crc32(0L, static_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

}  // namespace ckm
