#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tlens {

enum class ErrorKind {
  NumericDomain,
  DegenerateMask,
  OutOfRange,
  CaptureMiss,
  Truncation,
  Incompatible,
  Divergence,
  Config,
  EmptyCohort,
  Format,
  Io,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Generation ran out of context; carries the tokens produced so far.
class TruncationError : public Error {
 public:
  TruncationError(const std::string& what, std::vector<int> partial)
      : Error(ErrorKind::Truncation, what), partial_(std::move(partial)) {}

  const std::vector<int>& partial() const noexcept { return partial_; }

 private:
  std::vector<int> partial_;
};

}  // namespace tlens
