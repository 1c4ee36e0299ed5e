#pragma once

// The itrack command line: collect, merge, train, eval, parse, serve, demo.

#include <iosfwd>

namespace itrack {

// Exit codes: 0 success, 1 runtime failure, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace itrack
