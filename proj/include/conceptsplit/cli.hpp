#pragma once

#include <string>
#include <vector>

namespace csplit {

// Entry point behind the csplit binary; `args` excludes the program name.
// Exit codes: 0 success, 2 configuration error, 3 numeric failure (NaN),
// 1 anything else.
int run_cli(const std::vector<std::string>& args);

}  // namespace csplit
