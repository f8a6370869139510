#pragma once

#include <stdexcept>
#include <string>

namespace neuroscale {

// Caller broke an operation's precondition (shape mismatch, bad index range).
struct contract_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Inconsistent or out-of-range configuration values.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Index outside a container's valid range.
struct index_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values produced during evaluation; message names the site.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Signal preprocessing failed (e.g. baseline window not present).
struct preprocess_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Metric undefined for the given inputs (zero variance, zero-norm row, empty region).
struct metric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File / serialization failures.
struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Finite-difference oracle could not evaluate the probed function.
struct oracle_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace neuroscale
