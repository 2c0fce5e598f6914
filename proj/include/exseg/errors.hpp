#pragma once

#include <stdexcept>
#include <string>

namespace exseg {

enum class Err {
  Io,
  BadMagic,
  HeaderMismatch,
  ZeroVariance,
  DimsTooSmall,
  OutOfBounds,
  EmptySeeds,
  CgDivergence,
  BadArch,
  BadPatchDims,
  ShapeMismatch,
  NoLabeledVoxels,
  MissingClass,
  ZeroNormFeature,
  NoPositives,
  NoForeground,
  VolumeTooSmall,
  EmptyMask,
  DimsMismatch,
  SpecInfeasible,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::Io: return "Io";
    case Err::BadMagic: return "BadMagic";
    case Err::HeaderMismatch: return "HeaderMismatch";
    case Err::ZeroVariance: return "ZeroVariance";
    case Err::DimsTooSmall: return "DimsTooSmall";
    case Err::OutOfBounds: return "OutOfBounds";
    case Err::EmptySeeds: return "EmptySeeds";
    case Err::CgDivergence: return "CgDivergence";
    case Err::BadArch: return "BadArch";
    case Err::BadPatchDims: return "BadPatchDims";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::NoLabeledVoxels: return "NoLabeledVoxels";
    case Err::MissingClass: return "MissingClass";
    case Err::ZeroNormFeature: return "ZeroNormFeature";
    case Err::NoPositives: return "NoPositives";
    case Err::NoForeground: return "NoForeground";
    case Err::VolumeTooSmall: return "VolumeTooSmall";
    case Err::EmptyMask: return "EmptyMask";
    case Err::DimsMismatch: return "DimsMismatch";
    case Err::SpecInfeasible: return "SpecInfeasible";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}

  Err code() const noexcept { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace exseg
