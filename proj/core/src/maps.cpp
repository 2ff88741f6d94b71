#include "rino/maps.hpp"

#include "rino/error.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>

namespace rino {

Eigen::MatrixXd feature_coeffs(const SpectralBasis& basis, const Eigen::MatrixXd& features) {
  if (features.rows() != basis.evecs.rows()) throw DataError("feature_coeffs: feature rows differ from basis rows");
  return basis.evecs.transpose() * (basis.mass.asDiagonal() * features);
}

Eigen::MatrixXd commutativity_mask(const Eigen::VectorXd& evals_x, const Eigen::VectorXd& evals_y) {
  double top = 0.0;
  if (evals_x.size()) top = std::max(top, evals_x.cwiseAbs().maxCoeff());
  if (evals_y.size()) top = std::max(top, evals_y.cwiseAbs().maxCoeff());
  Eigen::MatrixXd d(evals_y.size(), evals_x.size());
  for (long i = 0; i < d.rows(); ++i) {
    for (long j = 0; j < d.cols(); ++j) {
      const double diff = evals_y[i] - evals_x[j];
      d(i, j) = top > 0.0 ? diff * diff / (top * top) : 0.0;
    }
  }
  return d;
}

Eigen::MatrixXd solve_fmap(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::VectorXd& evals_x,
                           const Eigen::VectorXd& evals_y, double gamma) {
  if (a.rows() != evals_x.size() || b.rows() != evals_y.size()) {
    throw DataError("solve_fmap: coefficient rows must match the eigenvalue counts");
  }
  ad::Tape tape;
  return ad::ridge_solve(tape.constant(a), tape.constant(b), commutativity_mask(evals_x, evals_y), gamma).re();
}

Eigen::MatrixXcd gradient_features(const Operators& ops, const Eigen::MatrixXd& features) {
  if (features.rows() != ops.num_vertices()) throw DataError("gradient_features: row count mismatch");
  Eigen::MatrixXcd w(features.rows(), features.cols());
  w.real() = ops.grad_re * features;
  w.imag() = ops.grad_im * features;
  return w;
}

Eigen::MatrixXcd solve_cfmap(const Eigen::MatrixXcd& w_x, const Eigen::MatrixXcd& w_y, const ConnectionBasis& basis_x,
                             const ConnectionBasis& basis_y, double gamma_q) {
  if (w_x.cols() != w_y.cols()) throw DataError("solve_cfmap: feature column counts differ");
  const Eigen::MatrixXcd a = basis_x.pinv() * w_x;
  const Eigen::MatrixXcd b = basis_y.pinv() * w_y;
  ad::Tape tape;
  return ad::ridge_solve(tape.constant(a), tape.constant(b), commutativity_mask(basis_x.evals, basis_y.evals),
                         gamma_q)
      .complex_value();
}

Eigen::MatrixXd soft_pointwise(const Eigen::MatrixXd& f_x, const Eigen::MatrixXd& f_y, double tau) {
  if (!(tau > 0.0)) throw UsageError("soft_pointwise: tau must be positive");
  if (f_x.cols() != f_y.cols()) throw DataError("soft_pointwise: feature dimensions differ");
  ad::Tape tape;
  return ad::softmax_rows(tape.constant(Eigen::MatrixXd(f_x * f_y.transpose())), tau).re();
}

IndexMap hard_map_nn(const Eigen::MatrixXd& f_x, const Eigen::MatrixXd& f_y) {
  if (f_x.rows() == 0 || f_y.rows() == 0) throw DataError("hard_map_nn: empty feature set");
  if (f_x.cols() != f_y.cols()) throw DataError("hard_map_nn: feature dimensions differ");
  // Candidate search through the Gram matrix, then exact distances for all
  // candidates within rounding distance of the best.
  const Eigen::VectorXd nx = f_x.rowwise().squaredNorm();
  const Eigen::VectorXd ny = f_y.rowwise().squaredNorm();
  IndexMap out(static_cast<std::size_t>(f_x.rows()));
  constexpr long kChunk = 512;
  for (long start = 0; start < f_x.rows(); start += kChunk) {
    const long rows = std::min(kChunk, f_x.rows() - start);
    Eigen::MatrixXd d2 = -2.0 * f_x.middleRows(start, rows) * f_y.transpose();
    d2.rowwise() += ny.transpose();
    d2.colwise() += nx.segment(start, rows);
    for (long r = 0; r < rows; ++r) {
      const long i = start + r;
      const double best = d2.row(r).minCoeff();
      const double slack = 1e-10 * (nx[i] + ny.maxCoeff()) + 1e-300;
      double exact_best = std::numeric_limits<double>::infinity();
      int arg = -1;
      for (long j = 0; j < f_y.rows(); ++j) {
        if (d2(r, j) > best + slack) continue;
        const double e = (f_x.row(i) - f_y.row(j)).squaredNorm();
        if (e < exact_best) {
          exact_best = e;
          arg = static_cast<int>(j);
        }
      }
      out[static_cast<std::size_t>(i)] = arg;
    }
  }
  return out;
}

Eigen::MatrixXd pi_to_c(const Eigen::MatrixXd& pi_yx, const SpectralBasis& basis_x, const SpectralBasis& basis_y) {
  if (pi_yx.rows() != basis_y.evecs.rows() || pi_yx.cols() != basis_x.evecs.rows()) {
    throw DataError("pi_to_c: soft map must be n_Y x n_X");
  }
  return basis_y.pinv() * (pi_yx * basis_x.evecs);
}

Eigen::MatrixXcd gradient_transfer(const ShapeBundle& s) {
  const Eigen::MatrixXcd g_phi = gradient_features(s.ops, s.basis.evecs);
  return s.conn_basis.pinv() * g_phi;
}

CToQResult c_to_q(const Eigen::MatrixXd& c, const Eigen::MatrixXcd& transfer_x, const Eigen::MatrixXcd& transfer_y) {
  if (c.cols() != transfer_x.cols() || c.rows() != transfer_y.cols() || transfer_x.rows() != transfer_y.rows()) {
    throw DataError("c_to_q: map and transfer dimensions disagree");
  }
  CToQResult out;
  const Eigen::MatrixXcd target = transfer_y * c.cast<std::complex<double>>() * transfer_x.adjoint();
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(target, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::VectorXd s = svd.singularValues();
  const double tol = 1e-12 * std::max(s.size() ? s[0] : 0.0, 1e-300);
  long rank = 0;
  for (long i = 0; i < s.size(); ++i) rank += s[i] > tol ? 1 : 0;
  if (rank < s.size()) {
    out.warnings.push_back("c_to_q: B A^H has rank " + std::to_string(rank) + " < " + std::to_string(s.size()) +
                           "; null directions resolved by the SVD phase convention");
  }
  out.q = svd.matrixU() * svd.matrixV().adjoint();
  return out;
}

CToQResult c_to_q(const Eigen::MatrixXd& c, const ShapeBundle& x, const ShapeBundle& y) {
  return c_to_q(c, gradient_transfer(x), gradient_transfer(y));
}

namespace maps_ad {

ad::Tensor pi_to_c(ad::Tensor pi_yx, const SpectralBasis& basis_x, const SpectralBasis& basis_y) {
  ad::Tape& tape = *pi_yx.tape();
  const ad::Tensor left = tape.constant(basis_y.pinv());
  const ad::Tensor right = tape.constant(basis_x.evecs);
  return ad::matmul(left, ad::matmul(pi_yx, right));
}

ad::Tensor c_to_q(ad::Tensor c, const Eigen::MatrixXcd& transfer_x, const Eigen::MatrixXcd& transfer_y) {
  ad::Tape& tape = *c.tape();
  const ad::Tensor tx = tape.constant(transfer_x);
  const ad::Tensor ty = tape.constant(transfer_y);
  return ad::unitary_polar(ad::matmul(ad::matmul(ty, c), tx, ad::Trans::kN, ad::Trans::kH));
}

}  // namespace maps_ad
}  // namespace rino
