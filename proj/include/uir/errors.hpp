#pragma once

#include <stdexcept>
#include <string>

namespace uir {

enum class ErrorKind {
  MissingFile,
  UndecodableImage,
  NonRGBImage,
  DimensionMismatch,
  InvalidPolicy,
  InvalidConfig,
  ShapeMismatch,
  NonFiniteActivation,
  InputTooSmall,
  NegativeWeight,
  ProcessFailure,
  UnparseableScore,
  Timeout,
  EmptyCorpus,
  ScorerFailure,
  IOFailure,
  CorruptIndex,
  EpochOutOfRange,
  NonFiniteLoss,
  DataRootMissing,
  OverlappingCorpora,
  EmptyDirectory,
  UnpairedFile,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::UndecodableImage: return "UndecodableImage";
    case ErrorKind::NonRGBImage: return "NonRGBImage";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::InvalidPolicy: return "InvalidPolicy";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorKind::InputTooSmall: return "InputTooSmall";
    case ErrorKind::NegativeWeight: return "NegativeWeight";
    case ErrorKind::ProcessFailure: return "ProcessFailure";
    case ErrorKind::UnparseableScore: return "UnparseableScore";
    case ErrorKind::Timeout: return "Timeout";
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::ScorerFailure: return "ScorerFailure";
    case ErrorKind::IOFailure: return "IOFailure";
    case ErrorKind::CorruptIndex: return "CorruptIndex";
    case ErrorKind::EpochOutOfRange: return "EpochOutOfRange";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::DataRootMissing: return "DataRootMissing";
    case ErrorKind::OverlappingCorpora: return "OverlappingCorpora";
    case ErrorKind::EmptyDirectory: return "EmptyDirectory";
    case ErrorKind::UnpairedFile: return "UnpairedFile";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool cond, ErrorKind kind, const std::string& message) {
  if (!cond) raise(kind, message);
}

}  // namespace uir
