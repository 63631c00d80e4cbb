// SPDX-License-Identifier: Apache-2.0
//
// Self-checks against independent oracles: finite differences, the
// brute-force renderer, joint versus cached attention, and decode
// invariants. Shared by the command-line tool and the acceptance run.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bt {

struct CheckResult {
    std::string name;
    double max_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

struct SuiteReport {
    std::string suite;
    std::vector<CheckResult> checks;
    double seconds = 0.0;

    bool passed() const;
    double max_error() const;
};

struct VerifyOptions {
    std::uint64_t seed = 0;
    int raster_scenes = 100;
    int max_gaussians = 200;
    int cache_configs = 20;
    long decodes = 100000;
};

// Every autodiff primitive, decode, decode followed by rasterization, and a
// small end-to-end reconstructor and synthesizer, in 64-bit mode.
SuiteReport verify_gradients(const VerifyOptions& opt = {});
// Tiled rasterizer against the reference renderer plus alpha + T = 1.
SuiteReport verify_rasterizer(const VerifyOptions& opt = {});
// Cached two-phase synthesis against the joint masked pass, and isolation
// of context tokens from target tokens.
SuiteReport verify_cache(const VerifyOptions& opt = {});
// Decoded Gaussians on their rays, unit quaternions, value ranges.
SuiteReport verify_decode(const VerifyOptions& opt = {});

// "gradcheck", "oracle" (rasterizer and decode), "cache", or "all".
std::vector<SuiteReport> run_suites(const std::string& suite, const VerifyOptions& opt = {});

std::string format_report(const SuiteReport& report);

} // namespace bt
