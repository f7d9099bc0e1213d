#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace wssod {

inline constexpr const char* kConfigEnvVar = "WSSOD_CONFIG";

enum ExitCode : int {
  kExitOk = 0,
  kExitRuntime = 1,
  kExitUsage = 2,
  kExitConfig = 3,
};

/// Entry point behind the `wssod` binary. `args` excludes the program name.
/// Failures print one line `error: <category>: <message>` to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace wssod
