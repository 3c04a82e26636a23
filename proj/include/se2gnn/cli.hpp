#pragma once

#include <ostream>

namespace se2gnn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitSimulation = 3;
inline constexpr int kExitDiverged = 4;
inline constexpr int kExitMismatch = 5;

/// Entry point of the `se2gnn` tool. Machine-readable results go to `out` as one
/// JSON line, diagnostics and usage text to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace se2gnn::cli
