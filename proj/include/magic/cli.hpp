#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace magic {

/// Exit codes of run_command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFailure = 2;

/// Runs one command line (args excludes the program name):
///   train | infer | rollout | sample | serve
/// Every run except serve writes `<out>/run.json` with the effective config, seed and the
/// sha256 of each artifact. The output directory defaults to $MAGIC_OUT_DIR, else ".".
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace magic
