#pragma once

#include <stdexcept>
#include <string>

namespace fecs {

// Training or sampling produced a non-finite loss at a known step.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

// A loss evaluated to NaN/inf outside of an iterative loop.
class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shift constant M is infinite: the pretraining/downstream relationship is
// uninformative and beta0 / the Proposition-style bound cannot be formed.
class UninformativeBoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every SGLD chain aborted; no estimate is available.
class EstimationFailedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fecs
