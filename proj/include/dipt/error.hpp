#pragma once

#include <stdexcept>
#include <string>

namespace dipt {

// Root of every error raised by the library. Subclasses let callers (and the
// CLI exit-code mapping) distinguish failure classes without string matching.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  ValidationError(const std::string& field, const std::string& what)
      : Error("invalid " + field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ShapeError : public Error { using Error::Error; };
class LengthError : public Error { using Error::Error; };
class NumericalError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class SchemaError : public Error { using Error::Error; };
class LoadError : public Error { using Error::Error; };
class CheckpointError : public Error { using Error::Error; };
class CompatibilityError : public Error { using Error::Error; };
class AggregationError : public Error { using Error::Error; };
class ProvenanceError : public Error { using Error::Error; };
class LeakageError : public Error { using Error::Error; };
class MissingArtifactError : public Error { using Error::Error; };

}  // namespace dipt
