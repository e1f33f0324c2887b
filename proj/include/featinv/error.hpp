// Copyright 2026 The featinv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace featinv {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or dimension contract violated.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad user-supplied configuration, manifest, or argument.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Numerical failure during training (non-finite loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace featinv
