#pragma once
// Command-line front end. One executable, subcommands for each pipeline
// stage, JSON config files with flag overrides, deterministic outputs
// under a fixed directory layout (parts/, corpora/, checkpoints/,
// reports/).

namespace klm {

// Exit code contract: 0 success, 1 runtime failure, 2 usage/config error.
int run_command(int argc, const char* const* argv);

}  // namespace klm
