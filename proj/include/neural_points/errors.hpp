#pragma once

#include <stdexcept>
#include <string>

namespace np {

/// Violated precondition or call-contract (empty cloud, k > N, ...).
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Incompatible tensor shapes for an operation.
struct dimension_error : std::runtime_error {
    explicit dimension_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Training-time failure (non-finite gradient or loss).
struct training_error : std::runtime_error {
    explicit training_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Bad configuration value or unknown config key.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

/// File format or filesystem failure.
struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace np
