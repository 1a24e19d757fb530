#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace fewshot {

// Stable error discriminants, mirrored one-to-one by the C API status codes.
enum class ErrorCode {
  format = 1,
  empty_class,
  split,
  sampling,
  shape,
  numerical,
  argument,
  train,
  decode,
  io,
  budget,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string message)
      : std::runtime_error(std::move(message)), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

struct FormatError : Error {
  explicit FormatError(std::string m) : Error(ErrorCode::format, std::move(m)) {}
};

struct EmptyClassError : Error {
  explicit EmptyClassError(std::string m) : Error(ErrorCode::empty_class, std::move(m)) {}
};

struct SplitError : Error {
  explicit SplitError(std::string m) : Error(ErrorCode::split, std::move(m)) {}
};

struct SamplingError : Error {
  explicit SamplingError(std::string m) : Error(ErrorCode::sampling, std::move(m)) {}
};

struct ShapeError : Error {
  explicit ShapeError(std::string m) : Error(ErrorCode::shape, std::move(m)) {}
};

struct NumericalError : Error {
  explicit NumericalError(std::string m) : Error(ErrorCode::numerical, std::move(m)) {}
};

struct ArgumentError : Error {
  explicit ArgumentError(std::string m) : Error(ErrorCode::argument, std::move(m)) {}
};

struct TrainError : Error {
  explicit TrainError(std::string m) : Error(ErrorCode::train, std::move(m)) {}
};

struct DecodeError : Error {
  explicit DecodeError(std::string m) : Error(ErrorCode::decode, std::move(m)) {}
};

struct IoError : Error {
  explicit IoError(std::string m) : Error(ErrorCode::io, std::move(m)) {}
};

struct BudgetError : Error {
  explicit BudgetError(std::string m) : Error(ErrorCode::budget, std::move(m)) {}
};

}  // namespace fewshot
