#pragma once

#include <stdexcept>
#include <string>

namespace losa {

// Shape/rank violations between tensors or against a module's configured dims.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// A call that violates a module's documented preconditions.
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid user-supplied data (empty video, out-of-range annotation, bad config value).
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem and serialization failures; `kind` distinguishes the failure class.
class IoError : public std::runtime_error {
public:
    enum class Kind { missing_file, truncated_payload, version_mismatch, malformed, write_failed };

    IoError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
    Kind kind;
};

// Training-time certification failure: a gradient reached a frozen parameter,
// or a learnable parameter is missing its gradient.
class AuditError : public std::runtime_error {
public:
    explicit AuditError(const std::string& msg) : std::runtime_error(msg) {}
};

// Synthetic-data packing could not satisfy the configured constraints.
class GenerationError : public std::runtime_error {
public:
    explicit GenerationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint does not fit the configured model.
class MismatchError : public std::runtime_error {
public:
    explicit MismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace losa
