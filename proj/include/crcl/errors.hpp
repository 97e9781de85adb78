#pragma once

#include <stdexcept>
#include <string>

namespace crcl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension disagreement between operands.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf or otherwise malformed values.
struct InvalidInputError : Error {
  using Error::Error;
};

// Out-of-range parameter (tau <= 0, alpha outside [0,1], ...).
struct InvalidParameterError : Error {
  using Error::Error;
};

// Ridge system not solvable even with the requested regularization.
struct SingularityError : Error {
  using Error::Error;
};

struct LabelError : Error {
  using Error::Error;
};

struct TraceError : Error {
  using Error::Error;
};

struct StateError : Error {
  using Error::Error;
};

struct EmptyInputError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace crcl
