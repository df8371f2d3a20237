// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line entry point: synth, train, eval, analyze, gradcheck, sweep.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace dsmoe {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dsmoe
