// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lopt {

/// Entry point of the `lopt` tool. `args` excludes the program name.
/// Returns 0 on success; errors go to `err` with a nonzero code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lopt
