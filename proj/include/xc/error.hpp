#pragma once

#include <stdexcept>
#include <string>

namespace xc {

// Exit codes used by the command-line driver.  Library code throws typed
// exceptions; the driver maps them onto these.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

// Bad shapes, mismatched dimensions, out-of-range indices.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated API preconditions (non-scalar loss, reused tape, ...).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration values.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Sequence exceeds a declared capacity.
struct LengthError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Cache blob incompatible with the model or corrupt on disk.
struct CacheError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed data files (JSONL records, containers, CSV).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad command-line invocations.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace xc
