#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace bft::cli {

enum ExitCode : int {
  kSuccess = 0,
  kValidationError = 1,
  kCheckFailure = 2,
  kRuntimeAbort = 3,
};

/// Parses `args` (without the program name) and runs one subcommand.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace bft::cli
