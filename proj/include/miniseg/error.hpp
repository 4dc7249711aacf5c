// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace miniseg {

enum class ErrorKind {
  Usage,     // bad arguments or configuration
  Shape,     // tensor extents do not agree
  Data,      // unreadable / malformed dataset or file
  Numeric,   // NaN / Inf encountered, failed gradient check
  Checkpoint // corrupt or incompatible checkpoint
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::Shape, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::Usage, what) {}
};

enum class CheckpointFault { BadMagic, VersionMismatch, Truncated, ShapeMismatch, Io };

class CheckpointError : public Error {
 public:
  CheckpointError(CheckpointFault fault, const std::string& what)
      : Error(ErrorKind::Checkpoint, what), fault_(fault) {}
  CheckpointFault fault() const noexcept { return fault_; }

 private:
  CheckpointFault fault_;
};

}  // namespace miniseg
