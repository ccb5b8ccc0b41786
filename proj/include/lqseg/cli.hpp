#pragma once

namespace lqseg::cli {

// Entry point behind the lqseg binary. Exit codes: 0 success, 2 usage or
// validation failure, 3 numerical failure.
int run(int argc, const char* const* argv);

}  // namespace lqseg::cli
