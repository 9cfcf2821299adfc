#pragma once

#include <stdexcept>
#include <string>

namespace lewm {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN/Inf appeared where the contract requires finite values.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// A batch too small to carry the requested statistic (e.g. B < 2).
class DegenerateBatchError : public Error {
 public:
  using Error::Error;
};

/// Malformed file or config content.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace lewm
