#pragma once

#include <stdexcept>
#include <string>

namespace equireg {

/// Raised when a loss, gradient or parameter becomes NaN or infinite.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for corrupted or malformed on-disk artifacts (bad magic, CRC mismatch).
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the SVD backward pass at repeated or vanishing singular values.
class GradientUnavailable : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace equireg
