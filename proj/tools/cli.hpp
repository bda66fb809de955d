#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ambulate::cli {

/// Runs one `ambulate` invocation. Returns 0 on success, 1 on a usage or
/// validation error, 2 on a runtime failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ambulate::cli
