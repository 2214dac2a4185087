#pragma once

#include <stdexcept>
#include <string>

namespace koff {

// Each error family maps onto one CLI exit code (see tools/koff.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller broke an API precondition (non-scalar loss, empty gate set, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class MaterializationError : public Error {
 public:
  using Error::Error;
};

// An artifact another subcommand should have produced is absent.
class MissingDependency : public Error {
 public:
  MissingDependency(const std::string& artifact, const std::string& producer)
      : Error("missing " + artifact + " (run `koff " + producer + "` first)"),
        producer_(producer) {}
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

}  // namespace koff
