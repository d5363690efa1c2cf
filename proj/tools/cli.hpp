#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace q4fg::cli {

/// Runs the q4fg command line. Returns 0 on success, 2 on a usage error and
/// 1 on a runtime error. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace q4fg::cli
