// Copyright 2026 The dsmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace dsmoe {

// Root of every error thrown by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value lies outside the domain of an operation (log of a non-positive
// number, probability outside (0, 1), negative learning rate, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Index-based lookup out of range (embedding row, scenario id, field name).
class LookupError : public Error {
 public:
  using Error::Error;
};

// A caller broke an API precondition that is not a shape or domain issue.
class ContractError : public Error {
 public:
  using Error::Error;
};

// A caller-supplied argument is out of its allowed range (K > catalog size).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class SamplingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace dsmoe
