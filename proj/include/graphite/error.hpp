/*
 * Copyright 2026 The GRAPHITE Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
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

namespace graphite {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input: malformed data, violated preconditions, missing files.
/// The CLI maps it to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Failure while computing (non-finite values, diverged training).
/// The CLI maps it to exit code 2.
class RuntimeError : public Error {
 public:
  using Error::Error;
};

}  // namespace graphite
