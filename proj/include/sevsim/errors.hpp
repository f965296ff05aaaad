#pragma once

#include <stdexcept>
#include <string>

namespace sevsim {

/// Base class for all simulator errors.
struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define SEVSIM_DEFINE_ERROR(Name)                                   \
  struct Name : SimError {                                          \
    explicit Name(const std::string& msg = #Name) : SimError(msg) {} \
  }

SEVSIM_DEFINE_ERROR(AlignmentError);
SEVSIM_DEFINE_ERROR(PhysRangeError);
SEVSIM_DEFINE_ERROR(NotMapped);
SEVSIM_DEFINE_ERROR(NoHandler);
SEVSIM_DEFINE_ERROR(StateSealed);
SEVSIM_DEFINE_ERROR(WriteOnceViolation);
SEVSIM_DEFINE_ERROR(FuelExceeded);
SEVSIM_DEFINE_ERROR(BuildError);
SEVSIM_DEFINE_ERROR(GadgetFault);
SEVSIM_DEFINE_ERROR(DisableFailed);
SEVSIM_DEFINE_ERROR(NoStableSequence);
SEVSIM_DEFINE_ERROR(CaptureTimeout);
SEVSIM_DEFINE_ERROR(MatchTimeout);

#undef SEVSIM_DEFINE_ERROR

}  // namespace sevsim
