#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace uch {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Entry outside the domain of an elementwise operation (e.g. log of a non-positive value).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input files disagree with each other (item counts, dimensions).
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Input file content is invalid (non-finite values, empty label rows).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss or parameter.
class DivergenceError : public Error {
 public:
  DivergenceError(std::size_t iteration, std::string term)
      : Error("training diverged at iteration " + std::to_string(iteration) + " in term '" + term + "'"),
        iteration_(iteration),
        term_(std::move(term)) {}

  std::size_t iteration() const noexcept { return iteration_; }
  const std::string& term() const noexcept { return term_; }

 private:
  std::size_t iteration_;
  std::string term_;
};

}  // namespace uch
