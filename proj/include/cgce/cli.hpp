#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace cgce::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kIoFailure = 1;
inline constexpr int kInvalid = 2;
inline constexpr int kFlagged = 3;

// Runs the tool with argv-style arguments (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cgce::cli
