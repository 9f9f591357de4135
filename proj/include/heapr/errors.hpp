#pragma once

#include <stdexcept>
#include <string>

namespace heapr {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Operand shapes do not conform.
struct DimensionError : Error {
    using Error::Error;
};

// Out-of-range argument or invalid configuration.
struct ArgumentError : Error {
    using Error::Error;
};

// Input data violates a precondition (e.g. token id outside the vocabulary).
struct DataError : Error {
    using Error::Error;
};

// Two artifacts that must belong together do not (trace vs batch, manifest vs model).
struct ConsistencyError : Error {
    using Error::Error;
};

}  // namespace heapr
