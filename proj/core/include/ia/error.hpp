#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>

namespace ia {

// Base for every error raised by the library. Callers that only care about
// "something went wrong with the inputs" can catch this one.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Shape or argument mismatch detected before any computation.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Bad magic, unsupported version, config mismatch between files.
class FormatError : public Error {
public:
    using Error::Error;
};

// Stream ended early or held impossible sizes. Carries the record (and layer,
// when the failure happened inside a layer block) being decoded.
class CorruptionError : public Error {
public:
    CorruptionError(const std::string &what, std::optional<std::size_t> record,
                    std::optional<std::size_t> layer = std::nullopt)
        : Error(what), record_(record), layer_(layer) {}

    std::optional<std::size_t> record() const { return record_; }
    std::optional<std::size_t> layer() const { return layer_; }

private:
    std::optional<std::size_t> record_;
    std::optional<std::size_t> layer_;
};

// Decoded or supplied data violates a type invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    IoError(const std::string &what, std::size_t bytes_written = 0)
        : Error(what), bytes_written_(bytes_written) {}

    std::size_t bytes_written() const { return bytes_written_; }

private:
    std::size_t bytes_written_;
};

} // namespace ia
