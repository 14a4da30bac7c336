#pragma once

#include "twophase/error.hpp"

namespace twophase::cli {

/// 0 success, 1 other, 2 usage, 3 io, 4 parse or schema, 5 infeasible,
/// 6 convergence, 7 partition or ledger, 8 domain.
int exit_code(ErrorKind kind);

/// Runs one subcommand. Failures print a single line
/// `error: class=<kind> message="..."` on stderr.
int dispatch(int argc, char** argv);

}  // namespace twophase::cli
