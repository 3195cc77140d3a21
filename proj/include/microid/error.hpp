#ifndef MICROID_ERROR_HPP_
#define MICROID_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace microid {

// Base class for every error raised by the library. The CLI maps any of these
// to a nonzero exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent input data (manifests, frames, clips).
class DataError : public Error {
 public:
  using Error::Error;
};

// A configuration value violates its type's invariants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor shapes or checkpoint fingerprints do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Filesystem problems: missing files, unwritable directories, bad magic.
class IoError : public Error {
 public:
  using Error::Error;
};

// Training diverged (non-finite loss) or could not run.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace microid

#endif  // MICROID_ERROR_HPP_
