#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cgce {

// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Invalid hyperparameters or an unusable configuration (empty dataset, bad tau, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed input records (manifest lines, labels).
class ValidationError : public Error {
public:
    using Error::Error;
};

// Filesystem failure: missing file, unreadable, rename failed.
class IoError : public Error {
public:
    using Error::Error;
};

// A binary file does not follow the expected layout.
class FormatError : public Error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Checkpoint header and tensor records disagree, or a tensor is missing.
class IntegrityError : public Error {
public:
    using Error::Error;
};

class UnsupportedVersionError : public Error {
public:
    UnsupportedVersionError(std::uint32_t found, std::uint32_t supported)
        : Error("unsupported checkpoint version " + std::to_string(found) + " (this build reads version " +
                std::to_string(supported) + ")"),
          found_(found) {}

    std::uint32_t found() const noexcept { return found_; }

private:
    std::uint32_t found_;
};

}  // namespace cgce
