#pragma once

#include <stdexcept>
#include <string>

namespace decfl {

/// Invalid input: bad arguments, malformed files, configuration errors.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A file could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numerical procedure failed to produce a result (e.g. no connected
/// random graph within the retry budget, eigensolver did not converge).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace decfl
