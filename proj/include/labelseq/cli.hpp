#pragma once

// Command-line entry point: gen-data, train, eval, analyze, report.

#include <ostream>

namespace labelseq {

// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace labelseq
