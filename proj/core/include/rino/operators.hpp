#pragma once

#include "rino/archive.hpp"
#include "rino/eigensolver.hpp"
#include "rino/mesh.hpp"

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <complex>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace rino {

/// Per-vertex orthonormal frames; t2 = normal x t1.
struct TangentFrames {
  Points normal;
  Points t1;
  Points t2;
};

/// Discrete operators of one mesh. Immutable once built.
struct Operators {
  Eigen::VectorXd mass;     ///< lumped vertex areas (diagonal of M)
  SparseMatrix stiffness;   ///< cotangent Laplacian L, PSD
  TangentFrames frames;
  /// Intrinsic gradient: real per-vertex function -> complex number per vertex
  /// in the local frame (real part along t1).
  ComplexSparse grad;
  SparseMatrix grad_re;     ///< Re(grad), kept for real arithmetic paths
  SparseMatrix grad_im;     ///< Im(grad)
  ComplexSparse conn;       ///< connection Laplacian, Hermitian PSD
  std::vector<std::string> warnings;

  int num_vertices() const { return static_cast<int>(mass.size()); }
};

/// Cotangent weights are clamped below at 1e-8; degenerate triangles (area
/// below 1e-14) contribute nothing to L and are reported in `warnings`.
/// Throws DataError on isolated vertices.
Operators build_operators(const Mesh& mesh);

/// Cotangent stiffness alone (same clamping as build_operators).
SparseMatrix cotangent_laplacian(const Mesh& mesh, std::vector<std::string>* warnings = nullptr);
Eigen::VectorXd lumped_mass(const Mesh& mesh);
TangentFrames tangent_frames(const Mesh& mesh);

/// Rotation angle r such that a tangent vector with complex coordinate z at
/// vertex `from` is transported to exp(i r) z at vertex `to`.
double transport_angle(const TangentFrames& frames, int from, int to);

struct SpectralBasis {
  Eigen::MatrixXd evecs;  ///< n x k, M-orthonormal
  Eigen::VectorXd evals;  ///< ascending
  Eigen::VectorXd mass;

  int size() const { return static_cast<int>(evals.size()); }
  /// Phi^T M, the mass-weighted pseudo-inverse of the basis.
  Eigen::MatrixXd pinv() const { return evecs.transpose() * mass.asDiagonal(); }
};

struct ConnectionBasis {
  Eigen::MatrixXcd evecs;  ///< n x k_Q, M-orthonormal (Hermitian inner product)
  Eigen::VectorXd evals;   ///< ascending
  Eigen::VectorXd mass;

  int size() const { return static_cast<int>(evals.size()); }
  Eigen::MatrixXcd pinv() const { return evecs.adjoint() * mass.asDiagonal(); }
};

SpectralBasis eig_generalized(const SparseMatrix& stiffness, const Eigen::VectorXd& mass, int k,
                              const EigsOptions& options = {});

/// Solves the Hermitian pencil through its real embedding of size 2n and
/// keeps one complex eigenvector per 2D real invariant subspace. The global
/// phase of every eigenvector makes its largest-magnitude entry real positive.
ConnectionBasis eig_connection(const ComplexSparse& conn, const Eigen::VectorXd& mass, int k,
                               const EigsOptions& options = {});

/// H_t(u) = Phi exp(-lambda t) Phi^T M u, column by column. `t` has one
/// entry per channel; column j of `u` uses t[j % t.size()], which broadcasts
/// a channel's time across the VN dimension of an n x (3 * c) feature laid
/// out as [vertex][vn-dim][channel].
Eigen::MatrixXd heat_diffuse(const SpectralBasis& basis, const Eigen::MatrixXd& u, const Eigen::VectorXd& t);

enum class DescriptorKind { kHks, kWks };

/// Heat kernel signature on log-spaced times, or wave kernel signature on
/// log-energy Gaussian windows; every descriptor column is normalized to unit
/// mass-weighted L1 norm.
Eigen::MatrixXd spectral_descriptors(const SpectralBasis& basis, DescriptorKind kind, int count);

/// Everything precomputed for one mesh.
struct ShapeBundle {
  Operators ops;
  SpectralBasis basis;
  ConnectionBasis conn_basis;
};

/// Version of the operator construction; part of the cache key.
inline constexpr std::uint32_t kOperatorBuildVersion = 1;

/// Effective basis size: k is reduced to floor(n / 2) on small meshes.
int effective_basis_size(int requested, int num_vertices, std::vector<std::string>* warnings = nullptr);

ShapeBundle build_shape_bundle(const Mesh& mesh, int k, int k_q);

/// Content hash of (vertices, triangles, k, k_Q, build version).
Digest operator_cache_key(const Mesh& mesh, int k, int k_q);

void cache_store(const std::filesystem::path& path, const Digest& key, const ShapeBundle& bundle);

struct CacheLookup {
  std::optional<ShapeBundle> bundle;
  std::string diagnostic;  ///< reason for a miss
};

/// Missing file, foreign key or version mismatch -> miss with diagnostic.
/// Corrupted or truncated file -> ChecksumError.
CacheLookup cache_load(const std::filesystem::path& path, const Digest& key);

}  // namespace rino
