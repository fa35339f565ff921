#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cbswr {

/// Exit codes shared by every command.
enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,  // gradcheck found a mismatch
  kExitConfig = 2,       // invalid config, bad flags, missing or corrupt artifacts
  kExitNumerical = 3,    // training aborted on a non-finite loss or gradient
  kExitInternal = 4,
};

/// Runs one command. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cbswr
