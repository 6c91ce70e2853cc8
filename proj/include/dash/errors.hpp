#pragma once

#include <stdexcept>
#include <string>

namespace dash {

// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A caller violated a documented precondition or invariant of an operation.
struct ContractError : Error {
    using Error::Error;
};

// User-supplied data is malformed (bad token id, bad config value, ...).
struct InputError : Error {
    using Error::Error;
};

// A size or arithmetic limit was exceeded (sequence capacity, integer range).
struct CapacityError : Error {
    using Error::Error;
};

// File I/O failed; message carries the path.
struct IoError : Error {
    using Error::Error;
};

// Bad command-line usage. Only thrown by the CLI layer.
struct UsageError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractError(what);
}

}  // namespace dash
