#pragma once

#include <ostream>

namespace gma {

/// Entry point of the `gma` tool. Returns 0 on success, 1 for user errors
/// (bad flags, missing or invalid inputs) and 2 for internal failures.
/// Every run first prints its resolved configuration as one JSON line on `out`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gma
