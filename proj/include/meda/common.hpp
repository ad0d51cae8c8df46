#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace meda {

using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i64 = std::int64_t;

// Error taxonomy. The CLI maps these to process exit codes
// (config -> 2, data -> 3, numeric -> 4).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// I/O failures, malformed files, ordering violations, corrupt checkpoints.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf detected mid-training; carries batch diagnostics in the message.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Degenerate metric input (single-class AUC, zero-norm cosine, ...).
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace meda
