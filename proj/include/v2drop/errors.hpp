#pragma once

#include <stdexcept>
#include <string>

namespace v2drop {

// Error taxonomy. Each family maps to a distinct failure mode so callers
// (and the CLI exit-code table) can tell them apart without string matching.

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension / length mismatch between tensors or vectors.
struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration value (odd head_dim, zero layers, ...).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed or inconsistent file contents (weight files, workload JSON).
struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(msg) {}
};

// Token id outside the vocabulary.
struct RangeError : Error {
    explicit RangeError(const std::string& msg) : Error(msg) {}
};

// A compression hook broke the prefill contract (unknown id, dropped a
// non-vision token, ...).
struct ContractViolation : Error {
    explicit ContractViolation(const std::string& msg) : Error(msg) {}
};

// Policy requested data the attention path cannot provide. Raised when
// attention_guided runs under streaming attention, where per-pair weights
// are never materialized.
struct PolicyCompatibilityError : Error {
    explicit PolicyCompatibilityError(const std::string& msg) : Error(msg) {}
};

} // namespace v2drop
