#pragma once

#include <stdexcept>
#include <string>

namespace rigrad {

enum class Errc {
  TapeFull,
  CrossTape,
  InvalidMark,
  NumericDomain,
  ParseError,
  UnsupportedStructure,
  LengthMismatch,
  DimensionMismatch,
  SingularInertia,
  Diverged,
  RigDiverged,
  ImmediateDivergence,
  OutOfBounds,
  SingularNormalEquations,
  InsufficientConvergence,
  FormatError,
  EmptyRollout,
  TrainingDiverged,
  ConfigError,
  RamBudgetExceeded,
};

/// All recoverable failures surface as Error; code() identifies the condition
/// so callers and tests can branch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

/// Simulation blow-up; carries the control tick at which it happened.
class DivergedError : public Error {
 public:
  DivergedError(const std::string& what, long tick = -1)
      : Error(Errc::Diverged, what), tick_(tick) {}
  long tick() const { return tick_; }

 private:
  long tick_;
};

/// Malformed rollout/trajectory file; carries the 1-based line number.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, long line = -1)
      : Error(Errc::FormatError, what), line_(line) {}
  long line() const { return line_; }

 private:
  long line_;
};

}  // namespace rigrad
