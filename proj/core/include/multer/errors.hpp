#pragma once

#include <stdexcept>
#include <string>

namespace multer {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or extent disagreement between operands.
struct DimensionError : Error {
    using Error::Error;
};

// Invalid model / run configuration (bad widths, batch too small, ...).
struct ConfigError : Error {
    using Error::Error;
};

// API misuse (backward on a non-scalar, loss not on the tape, ...).
struct UsageError : Error {
    using Error::Error;
};

// Bad dataset contents (label out of range, unreadable file, ...).
struct DataError : Error {
    using Error::Error;
};

// Non-finite values where finite input is required.
struct NumericError : Error {
    using Error::Error;
};

}  // namespace multer
