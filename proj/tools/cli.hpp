#ifndef MICROID_TOOLS_CLI_HPP_
#define MICROID_TOOLS_CLI_HPP_

#include <ostream>

namespace microid::cli {

// Environment variable naming the default dataset (directory or manifest).
inline constexpr const char* kDataRootEnv = "MICROID_DATA_ROOT";

// Entry point of the `microid` tool. Results go to `out`, diagnostics to
// `err`; returns the process exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace microid::cli

#endif  // MICROID_TOOLS_CLI_HPP_
