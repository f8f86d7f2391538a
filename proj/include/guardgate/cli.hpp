#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace guardgate {

// Exit codes: 0 success, 1 usage error, 2 runtime/upstream error,
// 3 validation/data error. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
            std::ostream& err);

}  // namespace guardgate
