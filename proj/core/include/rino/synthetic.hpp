#pragma once

#include "rino/mesh.hpp"

#include <cstdint>
#include <string_view>

namespace rino {

enum class SyntheticKind { kSphere, kEllipsoid, kBentBar, kSymBlob };

SyntheticKind synthetic_kind_from_string(std::string_view name);

/// Generator parameters. Only the fields relevant to the chosen kind are read.
struct SyntheticParams {
  // sphere / ellipsoid / sym_blob
  int subdivisions = 2;  ///< icosphere levels, [0, 7]
  double radius = 1.0;
  Eigen::Vector3d axes{1.0, 0.7, 0.5};  ///< ellipsoid semi-axes

  // bent_bar
  double length = 1.0;
  double bar_radius = 0.08;
  double taper = 0.35;       ///< radius grows linearly by this fraction along the bar
  double bend_angle = 0.0;   ///< total bend, [0, pi/2]
  int segments = 40;         ///< rings along the bar
  int ring_vertices = 12;
  double bump_height = 0.6;  ///< relative to the local radius; breaks intrinsic symmetry

  // sym_blob
  int bump_pairs = 3;
  double bump_amplitude = 0.25;

  /// Radial jitter amplitude applied to sphere/ellipsoid/sym_blob (seeded).
  /// sym_blob mirrors the jitter so the symmetry stays exact.
  double jitter = 0.0;
};

struct SyntheticShape {
  Mesh mesh;          ///< labels() holds the template vertex index of each vertex
  IndexMap symmetry;  ///< sym_blob only: mirror map x -> -x (an involution)
};

/// Deterministic for a fixed seed. Members of one family (same kind and
/// discretization parameters, different bend) share vertex labels, so the
/// ground-truth correspondence between them is the identity on labels.
SyntheticShape gen_synthetic(SyntheticKind kind, const SyntheticParams& params, std::uint64_t seed);

/// Icosphere with 10 * 4^s + 2 vertices on a sphere of the given radius.
Mesh icosphere(int subdivisions, double radius = 1.0);

}  // namespace rino
