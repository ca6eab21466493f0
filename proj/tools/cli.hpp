#pragma once

#include <string>
#include <vector>

namespace spiralscope {

/// Entry point for the `spiralscope` command: generate | pretrain | cv |
/// ablate | report. Returns the process exit code; errors go to stderr.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace spiralscope
