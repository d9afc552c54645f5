#pragma once

#include <stdexcept>
#include <string>

namespace flowmix {

// Non-finite values detected during evaluation; carries the originating layer
// or stage label so training aborts are diagnosable.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// A required artifact (dataset manifest, checkpoint, probe) is absent.
class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const std::string& what) : std::runtime_error(what) {}
};

// Configuration rejected at load time; message names the offending field.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace flowmix
