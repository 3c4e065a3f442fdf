#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace semicir {

enum class ErrorKind {
    ZeroVector,
    DimensionMismatch,
    NonFinite,
    NonFiniteLoss,
    InvalidArgument,
    BadMagic,
    UnsupportedVersion,
    TruncatedFile,
    DuplicateId,
    UnknownId,
    Io,
    InsufficientPairs,
    GeneratorUnavailable,
    GenerationFailed,
    LengthMismatch,
    ZeroProbability,
    ParseError,
    EmptySequence,
    SizeMismatch,
    BatchTooSmall,
};

std::string_view to_string(ErrorKind kind);

/// Single exception type for the library; `kind()` carries the failure class.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what);
    Error(ErrorKind kind, const std::string& what, std::size_t line);

    ErrorKind kind() const noexcept { return kind_; }
    /// 1-based line number for ParseError, 0 otherwise.
    std::size_t line() const noexcept { return line_; }
    /// The message without the kind prefix.
    const std::string& message() const noexcept { return message_; }

private:
    ErrorKind kind_;
    std::size_t line_{0};
    std::string message_;
};

}  // namespace semicir
