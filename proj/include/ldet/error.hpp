#pragma once

#include <stdexcept>
#include <string>

namespace ldet {

// Error taxonomy shared by all modules. The CLI maps these onto exit codes.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ArgumentError : std::invalid_argument {
  explicit ArgumentError(const std::string& msg) : std::invalid_argument(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StateError : std::runtime_error {
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IntegrityError : std::runtime_error {
  explicit IntegrityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SelectionError : std::runtime_error {
  explicit SelectionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace ldet
