#pragma once

// Command-line front end: one subcommand per pipeline stage, each driven by a
// JSON config plus dotted-key overrides.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "dcount/config.hpp"

namespace dcount::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;

inline const std::vector<std::string> kSubcommands = {
    "synth", "prep", "train-counter", "train-localizer", "eval", "ablate", "viz"};

struct CliInvocation {
  std::string subcommand;
  std::string config_path;  // empty: built-in defaults
  std::vector<std::string> overrides;
  bool verbose = false;
};

struct ResolvedConfig {
  nlohmann::json doc;  // canonical form echoed into manifests
  ExperimentConfig config;
  std::string hash;
};

// File, then overrides, then validation. Throws ConfigError.
ResolvedConfig resolve_config(const CliInvocation& inv);

// Creates <output_dir>/<UTC timestamp>-<config hash>[-n].
std::filesystem::path make_run_dir(const std::filesystem::path& output_dir,
                                   const std::string& config_hash);

// Executes one invocation. Failures print "error: <class>: <message>" on err
// and map to the exit codes above.
int run(const CliInvocation& inv, std::ostream& out, std::ostream& err);

// Parses argv and runs; usage errors exit with kExitUsage.
int main(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace dcount::cli
