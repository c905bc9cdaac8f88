#pragma once

#include <string>
#include <vector>

namespace trace_diag {

// Exit codes: 0 success, 1 validation error, 2 computation error.
int run_cli(int argc, const char* const* argv);

// Convenience for in-process callers; args exclude the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace trace_diag
