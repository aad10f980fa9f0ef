#pragma once

namespace ndftm {

// Full command-line entry point. Exit codes: 0 ok, 1 config error, 2 input
// error, 3 training divergence, 4 checkpoint/corpus compatibility error.
int run_cli(int argc, const char* const* argv);

}  // namespace ndftm
