#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kolmo {

enum class Errc {
  invalid_argument,
  parse_error,
  not_canonical,
  rank_deficient,
  internal_inconsistency,
  not_spd,
  quadrature_unconverged,
  window_underflow,
  boundary_node,
  out_of_domain,
  unstable,
  box_too_small,
  support_exceeds_grid,
  step_rejected,
  non_finite,
  no_admissible_fit,
  not_nonnegative,
  cylinder_unresolved,
  cone_unresolved,
  inconsistent,
};

constexpr std::string_view errc_name(Errc e) noexcept {
  switch (e) {
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::parse_error: return "ParseError";
    case Errc::not_canonical: return "NotCanonical";
    case Errc::rank_deficient: return "RankDeficient";
    case Errc::internal_inconsistency: return "InternalInconsistency";
    case Errc::not_spd: return "NotSPD";
    case Errc::quadrature_unconverged: return "QuadratureUnconverged";
    case Errc::window_underflow: return "WindowUnderflow";
    case Errc::boundary_node: return "BoundaryNode";
    case Errc::out_of_domain: return "OutOfDomain";
    case Errc::unstable: return "Unstable";
    case Errc::box_too_small: return "BoxTooSmall";
    case Errc::support_exceeds_grid: return "SupportExceedsGrid";
    case Errc::step_rejected: return "StepRejected";
    case Errc::non_finite: return "NonFinite";
    case Errc::no_admissible_fit: return "NoAdmissibleFit";
    case Errc::not_nonnegative: return "NotNonnegative";
    case Errc::cylinder_unresolved: return "CylinderUnresolved";
    case Errc::cone_unresolved: return "ConeUnresolved";
    case Errc::inconsistent: return "Inconsistent";
  }
  return "Unknown";
}

/// Every failure in the library is reported through this type; `code()`
/// identifies the condition, `what()` carries the detail.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(errc_name(code)) + ": " + detail), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& detail) { throw Error(code, detail); }

inline void require(bool cond, const std::string& detail) {
  if (!cond) fail(Errc::invalid_argument, detail);
}

}  // namespace kolmo
