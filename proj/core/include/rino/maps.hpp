#pragma once

#include "rino/autodiff.hpp"
#include "rino/mesh.hpp"
#include "rino/operators.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace rino {

/// Phi^T M F: coefficients of the columns of F in the basis.
Eigen::MatrixXd feature_coeffs(const SpectralBasis& basis, const Eigen::MatrixXd& features);

/// Laplacian-commutativity mask D_ij = (ly_i - lx_j)^2 / max(l)^2, ky x kx.
Eigen::MatrixXd commutativity_mask(const Eigen::VectorXd& evals_x, const Eigen::VectorXd& evals_y);

/// argmin_C ||C A - B||^2 + gamma sum D_ij C_ij^2, C is ky x kx.
Eigen::MatrixXd solve_fmap(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::VectorXd& evals_x,
                           const Eigen::VectorXd& evals_y, double gamma);

/// Intrinsic gradients G F of every feature column (complex n x d).
Eigen::MatrixXcd gradient_features(const Operators& ops, const Eigen::MatrixXd& features);

/// Complex ridge problem on connection-basis coefficients of W_X, W_Y.
Eigen::MatrixXcd solve_cfmap(const Eigen::MatrixXcd& w_x, const Eigen::MatrixXcd& w_y, const ConnectionBasis& basis_x,
                             const ConnectionBasis& basis_y, double gamma_q);

/// Softmax(F_X F_Y^T / tau) row by row: n_X x n_Y, rows indexed by X.
Eigen::MatrixXd soft_pointwise(const Eigen::MatrixXd& f_x, const Eigen::MatrixXd& f_y, double tau);

/// For each row of F_X, the index of the nearest row of F_Y (Euclidean);
/// ties go to the lower index.
IndexMap hard_map_nn(const Eigen::MatrixXd& f_x, const Eigen::MatrixXd& f_y);

/// C_XY = (Phi_Y^T M_Y) Pi_YX Phi_X for a soft map with rows on Y.
Eigen::MatrixXd pi_to_c(const Eigen::MatrixXd& pi_yx, const SpectralBasis& basis_x, const SpectralBasis& basis_y);

/// Psi^H M G Phi: connection-basis coefficients of the gradients of the LBO
/// eigenfunctions (k_Q x k).
Eigen::MatrixXcd gradient_transfer(const ShapeBundle& shape);

struct CToQResult {
  Eigen::MatrixXcd q;
  std::vector<std::string> warnings;
};

/// Unitary Procrustes solution Q = U V^H of SVD(B A^H), with
/// A = Psi_X^H M_X G_X Phi_X and B = Psi_Y^H M_Y G_Y Phi_Y C.
CToQResult c_to_q(const Eigen::MatrixXd& c, const ShapeBundle& x, const ShapeBundle& y);
CToQResult c_to_q(const Eigen::MatrixXd& c, const Eigen::MatrixXcd& transfer_x, const Eigen::MatrixXcd& transfer_y);

// Differentiable versions used by the training objective.
namespace maps_ad {
ad::Tensor pi_to_c(ad::Tensor pi_yx, const SpectralBasis& basis_x, const SpectralBasis& basis_y);
ad::Tensor c_to_q(ad::Tensor c, const Eigen::MatrixXcd& transfer_x, const Eigen::MatrixXcd& transfer_y);
}  // namespace maps_ad

}  // namespace rino
