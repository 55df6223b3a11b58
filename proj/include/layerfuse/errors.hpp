#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace layerfuse {

enum class ErrorKind {
  InvalidInput,
  InsufficientSamples,
  Singularity,
  Format,
  DegenerateData,
  TrainingDiverged,
  NumericalFailure,
  Exhausted,
  MissingTarget,
};

// Single exception type for the whole library. `index()` carries the failing
// pivot for singularity errors, the byte offset for format errors, and the
// step index for training divergence; it is npos when not applicable.
class Error : public std::runtime_error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  Error(ErrorKind kind, std::string message, std::size_t index = npos)
      : std::runtime_error(std::move(message)), kind_(kind), index_(index) {}

  [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
  [[nodiscard]] std::size_t index() const noexcept { return index_; }

  static Error invalid_input(std::string msg) {
    return {ErrorKind::InvalidInput, std::move(msg)};
  }
  static Error insufficient_samples(std::string msg) {
    return {ErrorKind::InsufficientSamples, std::move(msg)};
  }
  static Error singularity(std::string msg, std::size_t pivot) {
    return {ErrorKind::Singularity, std::move(msg), pivot};
  }
  static Error format(std::string msg, std::size_t offset = npos) {
    return {ErrorKind::Format, std::move(msg), offset};
  }
  static Error degenerate_data(std::string msg) {
    return {ErrorKind::DegenerateData, std::move(msg)};
  }
  static Error training_diverged(std::string msg, std::size_t step) {
    return {ErrorKind::TrainingDiverged, std::move(msg), step};
  }
  static Error numerical_failure(std::string msg) {
    return {ErrorKind::NumericalFailure, std::move(msg)};
  }
  static Error exhausted(std::string msg) {
    return {ErrorKind::Exhausted, std::move(msg)};
  }
  static Error missing_target(std::string msg) {
    return {ErrorKind::MissingTarget, std::move(msg)};
  }

 private:
  ErrorKind kind_;
  std::size_t index_;
};

}  // namespace layerfuse
