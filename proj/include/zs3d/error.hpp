#pragma once

#include <stdexcept>
#include <string>

namespace zs3d {

/// Malformed, missing or inconsistent input. The CLI maps this to exit code 2.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values produced during evaluation or optimization (exit code 3).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace zs3d
