#pragma once

#include <stdexcept>
#include <string>

namespace quase {

// Error taxonomy. The CLI maps these onto process exit codes
// (config -> 2, data -> 3, checkpoint -> 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes (dimension mismatches name both shapes).
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Out-of-range id, class index, or token position.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Violated API precondition (non-scalar loss, missing grad, empty dataset, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Reduction over a slice with no unmasked entries.
class DegenerateSliceError : public Error {
 public:
  using Error::Error;
};

// Sequence exceeds a configured length budget.
class LengthError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input data (parse and integrity failures).
class DataError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

}  // namespace quase
