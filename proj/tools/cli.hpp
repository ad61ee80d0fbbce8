#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace modicf::cli {

// Exit codes, one per failure class.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;   // rejected argument value or config
inline constexpr int kExitUsage = 2;     // bad flag or missing subcommand
inline constexpr int kExitFile = 3;      // unreadable or malformed file
inline constexpr int kExitTraining = 4;  // non-finite loss (NaN abort)

// Runs one command line (args excludes the program name). Diagnostics go to `err`
// as a single line; normal output goes to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace modicf::cli
