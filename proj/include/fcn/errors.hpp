#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fcn {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad caller input: empty sequences, out-of-range labels, invalid masks.
class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class VocabError : public Error {
 public:
  VocabError(const std::string& what, long long id) : Error(what), id_(id) {}
  long long id() const { return id_; }

 private:
  long long id_;
};

/// Dataset problems; line() is 1-based, 0 when not tied to a line.
class DataError : public Error {
 public:
  DataError(const std::string& what, std::size_t line = 0)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Non-finite value met during a numeric procedure.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace fcn
