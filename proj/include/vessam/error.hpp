#pragma once

#include <stdexcept>
#include <string>

namespace vessam {

// Error identities used across the library. Codes marked "internal" signal a
// broken invariant rather than bad user input (CLI maps them to exit 2).
enum class ErrorCode {
  // raster
  MalformedHeader,
  TruncatedPayload,
  UnsupportedDepth,
  OutOfBounds,
  // skeleton
  InternalLimit,
  // prompts
  NotThin,
  BranchAmbiguity,
  SchemaViolation,
  VersionMismatch,
  PointOutOfBounds,
  // topology
  EmptyGraph,
  InconsistentPromptSet,
  // autodiff
  ShapeMismatch,
  NonIntegralOutput,
  EmptyConcat,
  NonDivisibleExtent,
  NotScalar,
  DetachedLoss,
  // model
  NonSquareTokenCount,
  EmptySequence,
  BadConfig,
  // synthgen
  DegenerateSpec,
  // eval
  DimMismatch,
  EmptyDataset,
  DivergedLoss,
  // generic I/O
  IoError,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const { return code_; }

  // Internal-invariant errors indicate a bug, not bad input.
  bool internal() const {
    return code_ == ErrorCode::InternalLimit ||
           code_ == ErrorCode::BranchAmbiguity;
  }

 private:
  ErrorCode code_;
};

const char* error_code_name(ErrorCode code);

[[noreturn]] inline void raise(ErrorCode code, const std::string& what) {
  throw Error(code, std::string(error_code_name(code)) + ": " + what);
}

}  // namespace vessam
