#pragma once

#include <stdexcept>
#include <string>

namespace mmt {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents disagree with what an operation requires.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A softmax row has no unmasked entry.
class MaskError : public Error {
 public:
  using Error::Error;
};

// Token id outside [0, vocab size).
class VocabError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

// Malformed file: feature tables, checkpoints, config files.
class FormatError : public Error {
 public:
  using Error::Error;
};

class NumericsError : public Error {
 public:
  using Error::Error;
};

// Probability mass undefined because the vector is (numerically) zero.
class DegenerateMassError : public Error {
 public:
  using Error::Error;
};

class AutodiffError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmt
