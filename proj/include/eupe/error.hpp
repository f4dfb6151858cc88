#pragma once

#include <stdexcept>
#include <string>

namespace eupe {

enum class ErrorKind {
  Dimension,
  Parameter,
  Contract,
  State,
  Config,
  Format,
  Version,
  Truncated,
  ShapeMismatch,
  Io,
  Data,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define EUPE_DEFINE_ERROR(Name, Kind)                                   \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

EUPE_DEFINE_ERROR(DimensionError, Dimension)
EUPE_DEFINE_ERROR(ParameterError, Parameter)
EUPE_DEFINE_ERROR(ContractError, Contract)
EUPE_DEFINE_ERROR(StateError, State)
EUPE_DEFINE_ERROR(ConfigError, Config)
EUPE_DEFINE_ERROR(FormatError, Format)
EUPE_DEFINE_ERROR(VersionError, Version)
EUPE_DEFINE_ERROR(TruncatedError, Truncated)
EUPE_DEFINE_ERROR(ShapeMismatchError, ShapeMismatch)
EUPE_DEFINE_ERROR(IoError, Io)
EUPE_DEFINE_ERROR(DataError, Data)

#undef EUPE_DEFINE_ERROR

}  // namespace eupe
