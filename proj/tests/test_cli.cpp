// SPDX-License-Identifier: Apache-2.0
//
// Exercises the installed binary end to end: exit codes, config echoes,
// and byte-level determinism of file outputs.
#include <doctest.h>

#include <cstdlib>

#include <nlohmann/json.hpp>

#include "ckm/data.hpp"
#include "ckm/scorenet.hpp"
#include "oracles.hpp"

using namespace ckm;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CKM_BIN_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string sha_of(const std::string& path) {
    const auto bytes = read_file(path);
    return sha256_hex(bytes.data(), bytes.size());
}

nlohmann::json sidecar_without_runtime(const std::string& path) {
    nlohmann::json j = nlohmann::json::parse(read_file(path));
    j.erase("runtime_ms");
    return j;
}

std::string tiny_weights_file(const oracles::TempDir& dir) {
    ArchDesc a;
    a.base_width = 8;
    a.mults = {1, 1};
    a.temb_dim = 8;
    const std::string path = dir.file("tiny.ckmw");
    save_weights(init_params(a, 20, 0.05, 0.4, 3), path);
    return path;
}

}  // namespace

TEST_SUITE_BEGIN("cli");

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_cli("") == 2);
    CHECK(run_cli("frobnicate") == 2);
    CHECK(run_cli("synth --count 0 --out /tmp/nowhere_ckm") == 2);
}

TEST_CASE("synth: determinism and validation") {
    oracles::TempDir dir("cli_synth");
    const std::string a = dir.file("a");
    const std::string b = dir.file("b");
    CHECK(run_cli("synth --count 3 --size 16 --seed 9 --out " + a) == 0);
    CHECK(run_cli("synth --count 3 --size 16 --seed 9 --out " + b) == 0);
    for (const char* name : {"grid_0000.ckmg", "grid_0001.ckmg", "grid_0002.ckmg", "manifest.json"})
        CHECK(sha_of(a + "/" + name) == sha_of(b + "/" + name));
    CHECK(file_exists(a + "/config.json"));

    // score-net spatial constraint: size must divide by 4
    CHECK(run_cli("synth --count 1 --size 33 --out " + dir.file("c")) == 3);
}

TEST_CASE("observe + construct: determinism modulo the runtime field") {
    oracles::TempDir dir("cli_con");
    const std::string data = dir.file("data");
    REQUIRE(run_cli("synth --count 1 --size 16 --seed 4 --out " + data) == 0);
    const std::string weights = tiny_weights_file(dir);

    const std::string obs = dir.file("obs.ckmo");
    const std::string op = "'{\"kind\":\"mask_box\",\"top\":2,\"left\":2,\"height\":5,\"width\":5}'";
    CHECK(run_cli("observe --grid " + data + "/grid_0000.ckmg --op-json " + op + " --seed 5 --out " + obs) == 0);
    const std::string obs2 = dir.file("obs2.ckmo");
    CHECK(run_cli("observe --grid " + data + "/grid_0000.ckmg --op-json " + op + " --seed 5 --out " + obs2) == 0);
    CHECK(sha_of(obs) == sha_of(obs2));

    const std::string r1 = dir.file("r1.ckmg");
    const std::string r2 = dir.file("r2.ckmg");
    const std::string flags = " --corrector-steps 0 --zeta 5 --seed 11 --out ";
    CHECK(run_cli("construct --weights " + weights + " --obs " + obs + flags + r1) == 0);
    CHECK(run_cli("construct --weights " + weights + " --obs " + obs + flags + r2) == 0);
    CHECK(sha_of(r1) == sha_of(r2));
    CHECK(sidecar_without_runtime(r1 + ".json") == sidecar_without_runtime(r2 + ".json"));
    CHECK_NOTHROW(load_grid(r1));

    // --weights and --server together are a usage error
    CHECK(run_cli("construct --weights " + weights + " --server 127.0.0.1:1 --obs " + obs +
                  flags + dir.file("r3.ckmg")) == 2);
    // missing both is a usage error too
    CHECK(run_cli("construct --obs " + obs + flags + dir.file("r4.ckmg")) == 2);
}

TEST_CASE("train: loss csv, determinism, resume descriptor check") {
    oracles::TempDir dir("cli_train");
    const std::string data = dir.file("data");
    REQUIRE(run_cli("synth --count 2 --size 16 --seed 6 --out " + data) == 0);

    const std::string w1 = dir.file("m1.ckmw");
    const std::string w2 = dir.file("m2.ckmw");
    const std::string targs = " --steps 30 --batch 2 --n-timesteps 20 --beta-min 0.05 "
                              "--beta-max 0.4 --arch-base 8 --arch-mults 1,1 --temb-dim 8 "
                              "--jobs 1 --seed 12 --out ";
    CHECK(run_cli("train --data " + data + targs + w1) == 0);
    CHECK(run_cli("train --data " + data + targs + w2) == 0);
    CHECK(sha_of(w1) == sha_of(w2));
    CHECK(file_exists(w1 + ".loss.csv"));
    CHECK(file_exists(w1 + ".config.json"));

    // resuming with a mismatched descriptor fails cleanly
    CHECK(run_cli("train --data " + data + " --steps 5 --batch 2 --n-timesteps 20 "
                  "--beta-min 0.05 --beta-max 0.4 --arch-base 16 --arch-mults 1,1 "
                  "--temb-dim 8 --init " + w1 + " --out " + dir.file("m3.ckmw")) == 3);
    // matching descriptor resumes
    CHECK(run_cli("train --data " + data + targs + dir.file("m4.ckmw") + " --init " + w1) == 0);
}

TEST_CASE("publish/serve/fetch: registry errors surface as exit codes") {
    oracles::TempDir dir("cli_pub");
    const std::string weights = tiny_weights_file(dir);
    const std::string reg = dir.file("reg");

    CHECK(run_cli("publish --registry " + reg + " --weights " + weights +
                  " --version v1 --timestamp 1000") == 0);
    CHECK(run_cli("publish --registry " + reg + " --weights " + weights +
                  " --version v1 --timestamp 1001") == 3);  // duplicate version
    CHECK(run_cli("fetch --server 127.0.0.1:9 --cache-dir " + dir.file("cache")) == 4);  // no server
}

TEST_SUITE_END();
