#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace spinepose {

inline constexpr const char* kVersion = "0.1.0";

/// Exit codes of dispatch().
inline constexpr int kExitOk = 0;
inline constexpr int kExitDomainError = 1;
inline constexpr int kExitUsage = 2;

/// Runs one subcommand (gradcheck, train-toy, ablate, pseudo-label, eval,
/// triangulate-validate, serve, corpus-gen, refine). `args` excludes the
/// program name. Global flags: --config (key = value file with [subcommand]
/// sections; flags override it), --seed, --out-dir, --json. Every run that
/// gets past argument parsing writes <out-dir>/<subcommand>.manifest.json.
/// Domain errors print {"code", "message"} to `err` and return 1; usage
/// errors print the usage text and return 2. Never throws.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace spinepose
