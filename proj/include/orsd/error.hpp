#pragma once

#include <stdexcept>
#include <string>

namespace orsd {

// Base of every error the library throws. The CLI maps the subclasses onto
// process exit codes (usage 1, data 2, numeric 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or inconsistent input: bad files, unknown categories, degenerate boxes.
class DataError : public Error {
 public:
  using Error::Error;
};

// Shape mismatches, non-finite values, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace orsd
