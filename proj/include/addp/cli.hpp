#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace addp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

/// Environment variable naming the directory that relative --out paths (and
/// the default output directory) are resolved against.
inline constexpr const char* kOutputRootEnv = "ADDP_OUTPUT_ROOT";

/// Entry point of the `addp` tool. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Files written by the plot command.
inline constexpr const char* kForgettingPlot = "forgetting_curve.svg";
inline constexpr const char* kFinalBarPlot = "final_performance.svg";

}  // namespace addp::cli
