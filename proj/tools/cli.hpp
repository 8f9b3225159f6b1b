#pragma once

#include <string>
#include <vector>

namespace led {

// Runs one command line (without the program name) and returns the exit
// code: 0 on success, 1 on failed checks or numeric failures, 2 on usage or
// configuration errors. Messages go to stderr, progress to stdout.
int run_cli(const std::vector<std::string>& args);

}  // namespace led
