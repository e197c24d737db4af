#pragma once

#include <stdexcept>
#include <string>

namespace shygamp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  using Error::Error;
};

/// A shared message variance collapsed to zero (or went negative).
class DegenerateVariance : public Error {
 public:
  using Error::Error;
};

/// The iteration produced non-finite state.
class Divergence : public Error {
 public:
  Divergence(const std::string& what, int iteration)
      : Error(what + " (iteration " + std::to_string(iteration) + ")"), iteration_(iteration) {}
  int iteration() const noexcept { return iteration_; }

 private:
  int iteration_;
};

/// Normalising constant of a likelihood-side posterior underflowed.
class DegenerateLikelihood : public Error {
 public:
  using Error::Error;
};

/// A moment approximation left its region of validity (negative C or variance).
class MethodBreakdown : public Error {
 public:
  using Error::Error;
};

class GridTooLarge : public Error {
 public:
  using Error::Error;
};

class FitFailure : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

}  // namespace shygamp
