#pragma once

#include "cbpsdid/error.hpp"
#include "cbpsdid/simulation.hpp"

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>

namespace cbpsdid::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumerical = 3;
inline constexpr int kExitIo = 4;

int exit_code(ErrorKind kind);

/// Entry point behind the `cbpsdid` binary. Subcommands: estimate, simulate,
/// bound, constants, draw, echo, replay.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// One CSV row per method, full round-trip precision.
std::string study_csv(const StudyReport& report, const std::optional<BoundEstimate>& bound);
/// Fixed-width table with three decimals, Av.Bias ... CIL columns.
std::string study_table(const StudyReport& report, const std::optional<BoundEstimate>& bound);

/// 64-bit FNV-1a, hex encoded.
std::string checksum(std::string_view bytes);

/// Constants at `path`; computed with the default seed and draw count and
/// written there when the file does not exist yet.
StandardizationConstants load_or_create_constants(const std::string& path);
std::string default_constants_path();

}  // namespace cbpsdid::cli
