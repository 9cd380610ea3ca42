#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "fcn/gradcheck_suite.hpp"

namespace fcn::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kDataError = 2,
  kDiverged = 3,
  kGradCheckFailed = 4,
};

/// Parses `args` (without the program name) and runs one subcommand.
int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
        std::ostream& err);

/// The gradcheck subcommand over an explicit case list.
int cmd_gradcheck(const std::vector<GradCheckCase>& cases, std::ostream& out, std::ostream& err);

}  // namespace fcn::cli
