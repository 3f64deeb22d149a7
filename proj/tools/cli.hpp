#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace vlmopt::cli {

// Runs the command line `args` (args[0] is the program name). Normal output
// goes to `out`, diagnostics and usage text to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vlmopt::cli
