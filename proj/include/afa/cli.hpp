#pragma once

namespace afa {

/// Entry point of the `afa` tool. Returns 0 on success, 1 on usage errors and
/// 2 on runtime failures.
int run_cli(int argc, char** argv);

}  // namespace afa
