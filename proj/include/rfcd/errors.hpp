/*
   Copyright 2026 The rfcd Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include <stdexcept>
#include <string>

namespace rfcd {

// Process exit codes used by the command-line runner.
enum class ExitCode : int {
  kSuccess = 0,
  kValidation = 2,
  kNumerical = 3,
  kResource = 4,
};

class Error : public std::runtime_error {
 public:
  Error(std::string module, const std::string& what)
      : std::runtime_error(module + ": " + what), module_(std::move(module)) {}

  const std::string& module() const noexcept { return module_; }
  virtual ExitCode exit_code() const noexcept = 0;

 private:
  std::string module_;
};

// Bad input: invalid configuration, out-of-domain argument, shape mismatch.
class DomainError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kValidation; }
};

// Mem/Gen partition left a required set empty.
class PartitionError : public DomainError {
 public:
  using DomainError::DomainError;
};

class NumericalError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kNumerical; }
};

// U (or U + ridge I) failed a symmetric positive-definite factorization.
class SingularCurvatureError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// kappa^2 is not resolvably positive; a1/a0 divide by it.
class DegenerateFlowError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

// A sampled value was non-finite, or a quality check failed under --strict.
class EstimationError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

class ResourceError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kResource; }
};

}  // namespace rfcd
