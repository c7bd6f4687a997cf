#pragma once

#include <stdexcept>
#include <string>

namespace rmsflow {

/// Operand shapes do not agree.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A precondition on the calling sequence was violated (non-scalar loss, missing grad, ...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class BoundsError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Requested count exceeds what the source can provide.
class SizeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class EmptyNeighborhoodError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or unreadable on-disk data.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class TruncatedFileError : public FormatError {
public:
    using FormatError::FormatError;
};

class BadMagicError : public FormatError {
public:
    using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
public:
    using FormatError::FormatError;
};

/// File parsed but its content violates a data invariant (e.g. an empty cloud).
class ValidationError : public FormatError {
public:
    using FormatError::FormatError;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace rmsflow
