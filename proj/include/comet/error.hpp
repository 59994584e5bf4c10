#pragma once

#include <stdexcept>
#include <string>

namespace comet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated an operation's precondition (bad argument, wrong call order).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Operand shapes are incompatible; the message names the offending tape node.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A routing decision could not be made (e.g. unknown hash key).
class RoutingError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite value or otherwise had to abort.
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace comet
