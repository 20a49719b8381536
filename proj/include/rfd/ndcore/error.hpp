#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rfd {

enum class ErrorCode {
    shape_mismatch,
    non_finite,
    invalid_argument,
    out_of_range,
    io,
    format,
    version_mismatch,
    divergence,
    prerequisite,
    config,
    internal,
};

inline std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::shape_mismatch: return "shape_mismatch";
        case ErrorCode::non_finite: return "non_finite";
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::out_of_range: return "out_of_range";
        case ErrorCode::io: return "io";
        case ErrorCode::format: return "format";
        case ErrorCode::version_mismatch: return "version_mismatch";
        case ErrorCode::divergence: return "divergence";
        case ErrorCode::prerequisite: return "prerequisite";
        case ErrorCode::config: return "config";
        case ErrorCode::internal: return "internal";
    }
    return "unknown";
}

/// Every failure surfaced by the library carries a machine-readable code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        throw Error(code, message);
    }
}

} // namespace rfd
