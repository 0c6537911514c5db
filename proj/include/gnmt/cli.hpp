#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace gnmt {

/// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;  // a contract, I/O or configuration error
inline constexpr int kExitUsage = 2;    // malformed command line

/// Runs one subcommand. `args` excludes the program name. Diagnostics go to
/// `err` as a single line; reports without an output path go to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gnmt
