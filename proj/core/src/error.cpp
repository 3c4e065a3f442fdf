#include "semicir/error.hpp"

namespace semicir {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::ZeroVector: return "ZeroVector";
        case ErrorKind::DimensionMismatch: return "DimensionMismatch";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::BadMagic: return "BadMagic";
        case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
        case ErrorKind::TruncatedFile: return "TruncatedFile";
        case ErrorKind::DuplicateId: return "DuplicateId";
        case ErrorKind::UnknownId: return "UnknownId";
        case ErrorKind::Io: return "Io";
        case ErrorKind::InsufficientPairs: return "InsufficientPairs";
        case ErrorKind::GeneratorUnavailable: return "GeneratorUnavailable";
        case ErrorKind::GenerationFailed: return "GenerationFailed";
        case ErrorKind::LengthMismatch: return "LengthMismatch";
        case ErrorKind::ZeroProbability: return "ZeroProbability";
        case ErrorKind::ParseError: return "ParseError";
        case ErrorKind::EmptySequence: return "EmptySequence";
        case ErrorKind::SizeMismatch: return "SizeMismatch";
        case ErrorKind::BatchTooSmall: return "BatchTooSmall";
    }
    return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_{kind}, message_{what} {}

Error::Error(ErrorKind kind, const std::string& what, std::size_t line)
    : std::runtime_error(std::string(to_string(kind)) + " (line " + std::to_string(line) +
                         "): " + what),
      kind_{kind},
      line_{line},
      message_{what} {}

}  // namespace semicir
