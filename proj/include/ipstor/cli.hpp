#pragma once

#include <ostream>

namespace ipstor {

/// Entry point of the `ipstor` tool. Returns 0 on success, 1 when an
/// experiment or command fails, 2 on a usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace ipstor
