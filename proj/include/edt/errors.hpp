#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace edt {

/// Invalid user-facing configuration (bad env name, inconsistent dims, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unreadable, unwritable, truncated or malformed files.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller broke a precondition (shape mismatch and similar programming errors).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A NaN or Inf showed up while evaluating a computation graph.
class NumericFault : public std::runtime_error {
 public:
  explicit NumericFault(std::string op, std::optional<long> step = std::nullopt)
      : std::runtime_error(format(op, step)), op_(std::move(op)), step_(step) {}

  const std::string& op() const noexcept { return op_; }
  std::optional<long> step() const noexcept { return step_; }

  NumericFault at_step(long step) const { return NumericFault(op_, step); }

 private:
  static std::string format(const std::string& op, std::optional<long> step) {
    std::string msg = "non-finite value produced by op '" + op + "'";
    if (step) {
      msg += " at training step " + std::to_string(*step);
    }
    return msg;
  }

  std::string op_;
  std::optional<long> step_;
};

}  // namespace edt
