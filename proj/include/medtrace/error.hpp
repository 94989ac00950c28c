#pragma once

#include <stdexcept>
#include <string>

namespace medtrace {

// Base for every error raised by the library. Subclasses only tag the
// category so callers (the CLI in particular) can map them to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class InterventionError : public Error {
 public:
  using Error::Error;
};

class PairingError : public Error {
 public:
  using Error::Error;
};

class DegenerateProbabilityError : public Error {
 public:
  using Error::Error;
};

class DegenerateGridError : public Error {
 public:
  using Error::Error;
};

class InvalidSampleError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class ContractViolation : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid experiment specification (bad flag, inconsistent family/mode, ...).
class SpecError : public Error {
 public:
  using Error::Error;
};

}  // namespace medtrace
