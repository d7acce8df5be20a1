#pragma once

#include <stdexcept>
#include <string>

namespace percept {

// Every failure raised by the library derives from Error so the CLI can map
// families of failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PERCEPT_DEFINE_ERROR(Name, Base)  \
  class Name : public Base {              \
   public:                                \
    using Base::Base;                     \
  }

// Input or data that fails validation (exit code 3).
PERCEPT_DEFINE_ERROR(ValidationError, Error);
PERCEPT_DEFINE_ERROR(MalformedChain, ValidationError);
PERCEPT_DEFINE_ERROR(LayoutMismatch, ValidationError);
PERCEPT_DEFINE_ERROR(InvalidScene, ValidationError);
PERCEPT_DEFINE_ERROR(UnsupportedTask, ValidationError);
PERCEPT_DEFINE_ERROR(DataSchemaMismatch, ValidationError);
PERCEPT_DEFINE_ERROR(SchemaVersionMismatch, ValidationError);
PERCEPT_DEFINE_ERROR(UnknownToken, ValidationError);

// Bad configuration (exit code 2 when raised from the CLI).
PERCEPT_DEFINE_ERROR(ConfigError, Error);
PERCEPT_DEFINE_ERROR(MissingStage1Init, ConfigError);

// Numerical or runtime failures (exit code 4).
PERCEPT_DEFINE_ERROR(RuntimeFailure, Error);
PERCEPT_DEFINE_ERROR(ShapeMismatch, RuntimeFailure);
PERCEPT_DEFINE_ERROR(NonFiniteCost, RuntimeFailure);
PERCEPT_DEFINE_ERROR(EmptyPathSet, RuntimeFailure);
PERCEPT_DEFINE_ERROR(MissingPrediction, RuntimeFailure);
PERCEPT_DEFINE_ERROR(ContextOverflow, RuntimeFailure);
PERCEPT_DEFINE_ERROR(QueryBudgetExceeded, RuntimeFailure);

#undef PERCEPT_DEFINE_ERROR

}  // namespace percept
