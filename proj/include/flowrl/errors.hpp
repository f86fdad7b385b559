// Copyright 2026 The flowrl-lab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef FLOWRL_ERRORS_HPP_
#define FLOWRL_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace flowrl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor or vector dimensions do not line up.
struct ShapeError : Error {
  using Error::Error;
};

// A caller broke a documented precondition.
struct ContractError : Error {
  using Error::Error;
};

// NaN / inf where a finite value is required.
struct NumericError : Error {
  using Error::Error;
};

// Argument outside the mathematical domain (token id, support mismatch).
struct DomainError : Error {
  using Error::Error;
};

struct EnumerationTooLarge : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

}  // namespace flowrl

#endif  // FLOWRL_ERRORS_HPP_
