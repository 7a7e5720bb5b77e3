#pragma once

#include <ostream>

namespace limit {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDivergence = 3;

/// Entry point of the `limit` tool: synth, pretrain, metatrain, eval, ablate.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace limit
