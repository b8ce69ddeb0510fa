#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace lsp {

// Error taxonomy shared by all modules. Tests match on the code, messages
// carry the details.
enum class ErrorCode {
    BadMagic,
    TruncatedPayload,
    MissingFile,
    ShapeMismatch,
    NonFiniteGradient,
    NonFiniteLoss,
    VersionMismatch,
    CorruptFile,
    EmptyClass,
    InvalidClass,
    EmptyInput,
    ConfigError,
    MissingCheckpoint,
    IoError,
    PreconditionViolation,
    InvariantViolation,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
    throw Error(code, what);
}

inline const char* error_code_name(ErrorCode c) {
    switch (c) {
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::TruncatedPayload: return "TruncatedPayload";
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::VersionMismatch: return "VersionMismatch";
        case ErrorCode::CorruptFile: return "CorruptFile";
        case ErrorCode::EmptyClass: return "EmptyClass";
        case ErrorCode::InvalidClass: return "InvalidClass";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::MissingCheckpoint: return "MissingCheckpoint";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::PreconditionViolation: return "PreconditionViolation";
        case ErrorCode::InvariantViolation: return "InvariantViolation";
    }
    return "Unknown";
}

}  // namespace lsp
