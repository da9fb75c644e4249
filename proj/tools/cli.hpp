#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dexpr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs the command line `args` (without the program name). Normal output goes
/// to `out`, warnings and errors to `err`. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Git blob hash ("blob <size>\0" + bytes) of a file, as 40 hex digits.
std::string git_blob_sha1(const std::string& bytes);

}  // namespace dexpr::cli
