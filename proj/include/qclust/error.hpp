#pragma once

#include <stdexcept>
#include <string>

namespace qclust {

// Input data cannot be processed (malformed file, degenerate series, ...).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numeric routine hit a state it cannot continue from.
class NumericError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace qclust
