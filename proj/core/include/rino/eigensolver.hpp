#pragma once

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace rino {

using SparseMatrix = Eigen::SparseMatrix<double>;
using ComplexSparse = Eigen::SparseMatrix<std::complex<double>>;

struct EigsOptions {
  /// Shift of the spectral transformation; 0 selects -1e-3 tr(L) / tr(M).
  double shift = 0.0;
  /// Block expansions allowed before giving up; 0 means 50 * k.
  int max_iterations = 0;
  /// Convergence threshold on ||Op x - theta x||_M / |theta| of the
  /// shift-inverted operator.
  double tolerance = 1e-12;
  /// Block width. Must exceed the largest eigenvalue multiplicity of interest.
  int block_size = 8;
  std::uint64_t seed = 0x5eed;
};

struct EigsResult {
  Eigen::VectorXd values;   ///< ascending
  Eigen::MatrixXd vectors;  ///< M-orthonormal columns
  int iterations = 0;
  double max_residual = 0.0;  ///< max_i ||L x_i - lambda_i M x_i||_2
};

/// k smallest eigenpairs of the pencil (L, diag(mass)) by block shift-invert
/// Lanczos with full reorthogonalization and thick (Krylov-Schur style)
/// restarts. Each eigenvector's first entry above 1e-6 * max|entry| is made
/// positive.
///
/// Throws NumericalError when the factorization of L - shift * M fails or the
/// iteration budget runs out.
EigsResult eigs_shift_invert(const SparseMatrix& stiffness, const Eigen::VectorXd& mass, int k,
                             const EigsOptions& options = {});

/// Real symmetric embedding [[Re, -Im], [Im, Re]] of a Hermitian matrix.
SparseMatrix real_embedding(const ComplexSparse& hermitian);

}  // namespace rino
