#pragma once

#include <iosfwd>

namespace raamil {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Entry point for the `raamil` tool. Exit codes: 0 success, 1 validation or
/// runtime failure, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace raamil
