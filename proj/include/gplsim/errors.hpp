#pragma once

#include <stdexcept>
#include <string>

namespace gplsim {

/// Base class of every exception thrown by the library. `kind()` is the
/// machine-readable tag the CLI reports in its error JSON.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define GPLSIM_DEFINE_ERROR(Name)                                  \
  class Name : public Error {                                      \
   public:                                                         \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  };

GPLSIM_DEFINE_ERROR(DomainError)
GPLSIM_DEFINE_ERROR(ConfigError)
GPLSIM_DEFINE_ERROR(NumericalError)
GPLSIM_DEFINE_ERROR(NonConvergence)
GPLSIM_DEFINE_ERROR(SingularDesign)
GPLSIM_DEFINE_ERROR(SingularBread)
GPLSIM_DEFINE_ERROR(BracketFailure)
GPLSIM_DEFINE_ERROR(TooManyFailures)
GPLSIM_DEFINE_ERROR(ParseError)
GPLSIM_DEFINE_ERROR(SchemaError)
GPLSIM_DEFINE_ERROR(DuplicateVisit)

#undef GPLSIM_DEFINE_ERROR

}  // namespace gplsim
