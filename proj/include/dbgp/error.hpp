/*
 * Copyright 2026 The dbgp Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <stdexcept>
#include <string>

namespace dbgp {

/// Base of every error raised by the toolkit. The CLI maps each subclass to
/// a distinct exit status (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value; the message names the offending field.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : Error("config error: " + field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("parse error at line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public DataError {
 public:
  ValidationError(const std::string& patient_id, const std::string& what)
      : DataError("validation error for patient '" + patient_id + "': " + what),
        patient_id_(patient_id) {}
  const std::string& patient_id() const noexcept { return patient_id_; }

 private:
  std::string patient_id_;
};

/// Metric undefined on the given input (single class, degenerate group, ...).
class UndefinedMetricError : public DataError {
 public:
  using DataError::DataError;
};

/// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Index outside a lookup table.
class LookupError : public Error {
 public:
  LookupError(std::size_t position, const std::string& what)
      : Error("lookup error at position " + std::to_string(position) + ": " + what),
        position_(position) {}
  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

/// Non-finite values, failed factorizations, divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Latent point outside the interpolation grid hull.
class ExtrapolationError : public NumericError {
 public:
  using NumericError::NumericError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

enum class ExitCode : int { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4, kIo = 5 };

inline ExitCode exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return ExitCode::kConfig;
  if (dynamic_cast<const DataError*>(&e)) return ExitCode::kData;
  if (dynamic_cast<const LookupError*>(&e)) return ExitCode::kData;
  if (dynamic_cast<const IoError*>(&e)) return ExitCode::kIo;
  if (dynamic_cast<const DimensionError*>(&e)) return ExitCode::kConfig;
  return ExitCode::kNumeric;
}

}  // namespace dbgp
