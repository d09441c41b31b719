#pragma once

#include <stdexcept>
#include <string>

namespace emoattack {

// Violated precondition or out-of-range argument.
class DomainError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed file content (bad RIFF header, truncated chunk, bad manifest line).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Well-formed file in an encoding this library does not read.
class UnsupportedEncodingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Request exceeds what a pool can supply (e.g. more poison than candidates).
class CapacityError : public std::runtime_error {
 public:
  CapacityError(const std::string& what, std::size_t available)
      : std::runtime_error(what), available_(available) {}
  std::size_t available() const noexcept { return available_; }

 private:
  std::size_t available_;
};

// Non-finite loss during optimisation.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, int epoch, int batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

// Invalid experiment configuration; `field` is a dotted path such as
// "corpus.emotion_mix".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : std::runtime_error(field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

}  // namespace emoattack
