#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace gma {

/// Base for every error raised by the library. Callers that only care about
/// "something in gma failed" catch this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class ShapeError : public Error { using Error::Error; };
class TopologyError : public Error { using Error::Error; };
class IndexError : public Error { using Error::Error; };
class UsageError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class CorrespondenceError : public Error { using Error::Error; };
class CompatibilityError : public Error { using Error::Error; };

/// Raised when a triangle has (numerically) zero area.
class DegenerateFaceError : public Error {
public:
    explicit DegenerateFaceError(std::size_t face)
        : Error("degenerate face " + std::to_string(face)), face_(face) {}
    std::size_t face() const noexcept { return face_; }

private:
    std::size_t face_;
};

/// Raised when a reference edge has zero length.
class DegenerateEdgeError : public Error {
public:
    DegenerateEdgeError(int a, int b)
        : Error("degenerate edge " + std::to_string(a) + "-" + std::to_string(b)) {}
};

/// Non-finite values during optimization.
class NumericError : public Error { using Error::Error; };

/// Dataset loading failures; message names the offending file or field.
class LoadError : public Error { using Error::Error; };

/// Checkpoint container failures, one type per check.
class CheckpointError : public LoadError { using LoadError::LoadError; };
class BadMagicError : public CheckpointError { using CheckpointError::CheckpointError; };
class ChecksumError : public CheckpointError { using CheckpointError::CheckpointError; };
class DimensionError : public CheckpointError { using CheckpointError::CheckpointError; };

}  // namespace gma
