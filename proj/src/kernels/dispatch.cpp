// SPDX-License-Identifier: Apache-2.0
#include <cstdlib>
#include <cstring>

#include "ckm/kernels.hpp"
#include "ckm/util.hpp"

namespace ckm::kernels {

namespace {

const Ops& select() {
    const char* force = std::getenv("CKM_KERNELS");
    if (force) {
        if (std::strcmp(force, "scalar") == 0) return scalar_ops();
        if (std::strcmp(force, "avx2") == 0) {
            if (const Ops* o = avx2_ops()) return *o;
            CKM_LOG_WARN("CKM_KERNELS=avx2 requested but unavailable; using scalar");
            return scalar_ops();
        }
        if (std::strcmp(force, "neon") == 0) {
            if (const Ops* o = neon_ops()) return *o;
            CKM_LOG_WARN("CKM_KERNELS=neon requested but unavailable; using scalar");
            return scalar_ops();
        }
        CKM_LOG_WARN("unknown CKM_KERNELS value '%s'; using scalar", force);
        return scalar_ops();
    }
    if (const Ops* o = avx2_ops()) return *o;
    if (const Ops* o = neon_ops()) return *o;
    return scalar_ops();
}

}  // namespace

const Ops& active() {
    static const Ops& ops = select();
    return ops;
}

}  // namespace ckm::kernels
