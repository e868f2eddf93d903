#pragma once

// The `ctsan` command line: gen, train, detect, eval, ensemble, gradcheck and
// simmatrix. Exit codes: 0 success, 1 usage error, 2 data or format error,
// 3 a gradient check that ran but failed.

#include <ostream>

namespace ctsan {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitCheckFailed = 3;

// Revision the library was built from, "unknown" outside a git checkout.
const char* git_revision();

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ctsan
