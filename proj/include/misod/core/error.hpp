#pragma once

#include <stdexcept>
#include <string>

namespace misod {

// Bad wiring supplied by the caller: channel mismatches, incompatible shapes,
// inconsistent configuration values.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad data supplied at runtime: undecodable files, indivisible input sizes,
// mismatched prediction/ground-truth shapes.
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Problems loading serialized artifacts (weight files, checkpoints).
struct LoadError : std::runtime_error {
  explicit LoadError(const std::string& msg) : std::runtime_error(msg) {}
};

// Broken internal invariant; a bug, not a usage error.
struct InternalError : std::logic_error {
  explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

inline void internal_check(bool cond, const std::string& msg) {
  if (!cond) throw InternalError(msg);
}

}  // namespace misod
