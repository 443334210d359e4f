#include "lrdg/losses.hpp"

namespace lrdg {

UncertaintyVariant parse_uncertainty_variant(const std::string& name) {
  if (name == "entropy") return UncertaintyVariant::entropy;
  if (name == "least_likely") return UncertaintyVariant::least_likely;
  throw ConfigError("unknown uncertainty variant '" + name + "'");
}

ReconstructionKind parse_reconstruction_kind(const std::string& name) {
  if (name == "l2") return ReconstructionKind::l2;
  if (name == "l1") return ReconstructionKind::l1;
  throw ConfigError("unknown reconstruction loss '" + name + "' (supported: l2, l1)");
}

std::string to_string(UncertaintyVariant v) {
  return v == UncertaintyVariant::entropy ? "entropy" : "least_likely";
}

std::string to_string(ReconstructionKind k) { return k == ReconstructionKind::l2 ? "l2" : "l1"; }

}  // namespace lrdg
