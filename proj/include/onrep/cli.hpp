#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace onrep {

enum ExitCode { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

/// Runs one command line (program name first). Messages go to `out` and `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace onrep
