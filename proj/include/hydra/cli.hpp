#pragma once

namespace hydra {

// Single entry point behind the `hydra` binary; exposed for in-process tests.
// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
int run_cli(int argc, const char* const* argv);

}  // namespace hydra
