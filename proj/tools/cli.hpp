#pragma once

#include <ostream>

namespace mupmoe::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFail = 2;

/// Parses argv and runs one subcommand. Returns 0 on success or verification
/// pass, 1 on usage/config/I-O errors, 2 on verification failure.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace mupmoe::cli
