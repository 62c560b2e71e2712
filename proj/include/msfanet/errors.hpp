#pragma once

#include <stdexcept>
#include <string>

namespace msfa {

/// Violated precondition or shape contract at an API boundary.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Missing, unreadable or corrupt input file.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Annotation sidecar or manifest that parses but does not match the schema.
class SchemaError : public std::runtime_error {
 public:
  SchemaError(std::string field, const std::string& what)
      : std::runtime_error("schema error at '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class ExportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MSFA_EXPECT(cond, msg)                                   \
  do {                                                           \
    if (!(cond)) throw ::msfa::ContractError(std::string(msg));  \
  } while (0)

}  // namespace msfa
