#pragma once

#include <string>
#include <vector>

namespace m2fn::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitData = 1;
inline constexpr int kExitUsage = 2;

// Entry point of the m2fn tool. args[0] is the program name.
int run(const std::vector<std::string>& args);

}  // namespace m2fn::cli
