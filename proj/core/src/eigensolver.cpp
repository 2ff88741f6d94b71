#include "rino/eigensolver.hpp"

#include "rino/error.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace rino {
namespace {

// Basis of the search space, M-orthonormal, together with the operator
// applied to each column.
class KrylovBasis {
 public:
  KrylovBasis(long n, long capacity, const Eigen::VectorXd& mass) : mass_(mass), v_(n, capacity), w_(n, capacity) {}

  long size() const { return size_; }
  long capacity() const { return v_.cols(); }
  auto v() const { return v_.leftCols(size_); }
  auto w() const { return w_.leftCols(size_); }

  void append(const Eigen::MatrixXd& vecs, const Eigen::MatrixXd& op_vecs) {
    v_.middleCols(size_, vecs.cols()) = vecs;
    w_.middleCols(size_, vecs.cols()) = op_vecs;
    size_ += vecs.cols();
  }

  void reset(const Eigen::MatrixXd& vecs, const Eigen::MatrixXd& op_vecs) {
    size_ = 0;
    append(vecs, op_vecs);
  }

  // Removes the components of x along the current basis (classical
  // Gram-Schmidt, applied twice).
  void orthogonalize(Eigen::MatrixXd& x) const {
    if (size_ == 0) return;
    for (int pass = 0; pass < 2; ++pass) {
      const Eigen::MatrixXd coeff = v().transpose() * (mass_.asDiagonal() * x);
      x.noalias() -= v() * coeff;
    }
  }

 private:
  const Eigen::VectorXd& mass_;
  Eigen::MatrixXd v_;
  Eigen::MatrixXd w_;
  long size_ = 0;
};

double m_norm(const Eigen::VectorXd& mass, const Eigen::Ref<const Eigen::VectorXd>& x) {
  return std::sqrt(std::max(0.0, x.dot(mass.cwiseProduct(x))));
}

}  // namespace

SparseMatrix real_embedding(const ComplexSparse& h) {
  const long n = h.rows();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(h.nonZeros()) * 4);
  for (int k = 0; k < h.outerSize(); ++k) {
    for (ComplexSparse::InnerIterator it(h, k); it; ++it) {
      const long i = it.row(), j = it.col();
      const double re = it.value().real(), im = it.value().imag();
      trips.emplace_back(i, j, re);
      trips.emplace_back(i + n, j + n, re);
      if (im != 0.0) {
        trips.emplace_back(i, j + n, -im);
        trips.emplace_back(i + n, j, im);
      }
    }
  }
  SparseMatrix out(2 * n, 2 * n);
  out.setFromTriplets(trips.begin(), trips.end());
  return out;
}

EigsResult eigs_shift_invert(const SparseMatrix& stiffness, const Eigen::VectorXd& mass, int k,
                             const EigsOptions& opt) {
  const long n = stiffness.rows();
  if (stiffness.cols() != n || mass.size() != n) throw DataError("eigensolver: dimension mismatch");
  if (k < 1 || k > n) throw DataError("eigensolver: k must lie in [1, n]");
  if ((mass.array() <= 0.0).any()) throw DataError("eigensolver: mass matrix must be positive");

  // The default shift sits a little below zero relative to the mean
  // spectral scale. A tiny shift would map the null space of L to a huge
  // Ritz value and drown the remaining eigenvalues in rounding error.
  const double sigma = opt.shift != 0.0 ? opt.shift : -1e-3 * stiffness.diagonal().sum() / mass.sum();
  SparseMatrix shifted = stiffness;
  for (long i = 0; i < n; ++i) shifted.coeffRef(i, i) -= sigma * mass[i];
  shifted.makeCompressed();
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(shifted);
  if (ldlt.info() != Eigen::Success) {
    std::ostringstream msg;
    msg << "eigensolver: factorization of L - sigma M failed at shift sigma = " << sigma;
    throw NumericalError(msg.str());
  }
  auto apply_op = [&](const Eigen::MatrixXd& x) -> Eigen::MatrixXd {
    Eigen::MatrixXd y = ldlt.solve(mass.asDiagonal() * x);
    return y;
  };

  const int b = std::max(1, std::min<int>(opt.block_size, static_cast<int>(n)));
  const long capacity = std::min<long>(n, std::max<long>(2L * k + 2L * b, k + 40L + b));
  const int max_iter = opt.max_iterations > 0 ? opt.max_iterations : 50 * k;

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> gauss;
  auto random_block = [&](long cols) {
    Eigen::MatrixXd r(n, cols);
    for (long j = 0; j < cols; ++j) {
      for (long i = 0; i < n; ++i) r(i, j) = gauss(rng);
    }
    return r;
  };

  KrylovBasis basis(n, capacity, mass);

  // Orthonormalizes the columns of x against the basis and each other;
  // columns that vanish are replaced by fresh random directions while the
  // space is not exhausted.
  auto orthonormal_block = [&](Eigen::MatrixXd x) -> Eigen::MatrixXd {
    std::vector<Eigen::VectorXd> kept;
    for (long j = 0; j < x.cols(); ++j) {
      for (int attempt = 0; attempt < 3; ++attempt) {
        Eigen::MatrixXd col = attempt == 0 ? Eigen::MatrixXd(x.col(j)) : random_block(1);
        const double before = m_norm(mass, col.col(0));
        basis.orthogonalize(col);
        for (int pass = 0; pass < 2; ++pass) {
          for (const auto& q : kept) col.col(0) -= q * q.dot(mass.cwiseProduct(col.col(0)));
        }
        const double after = m_norm(mass, col.col(0));
        if (before > 0.0 && after > 1e-10 * before) {
          kept.emplace_back(col.col(0) / after);
          break;
        }
        if (basis.size() + static_cast<long>(kept.size()) >= n) break;
      }
      if (basis.size() + static_cast<long>(kept.size()) >= n) break;
    }
    Eigen::MatrixXd out(n, static_cast<long>(kept.size()));
    for (std::size_t j = 0; j < kept.size(); ++j) out.col(static_cast<long>(j)) = kept[j];
    return out;
  };

  Eigen::MatrixXd next = orthonormal_block(random_block(b));
  Eigen::VectorXd theta;
  Eigen::MatrixXd ritz, op_ritz;
  int iterations = 0;
  bool converged = false;
  double worst = 0.0;
  double best = std::numeric_limits<double>::infinity();
  int stale = 0;

  while (true) {
    // Expand until the basis is full or the space is exhausted.
    // Only whole blocks are appended: truncating the pending block would
    // break the Krylov relation that the thick restart relies on.
    while (next.cols() > 0 && basis.size() + next.cols() <= capacity) {
      Eigen::MatrixXd op_next = apply_op(next);
      ++iterations;
      basis.append(next, op_next);
      if (basis.size() >= n) {
        next.resize(n, 0);
        break;
      }
      next = orthonormal_block(op_next);
    }

    // Rayleigh-Ritz on the whole basis.
    Eigen::MatrixXd h = basis.v().transpose() * (mass.asDiagonal() * basis.w());
    h = 0.5 * (h + h.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
    if (es.info() != Eigen::Success) throw NumericalError("eigensolver: Rayleigh-Ritz step failed");
    // Largest theta first: those are the eigenvalues closest to the shift.
    const long m = h.rows();
    theta = es.eigenvalues().reverse();
    const Eigen::MatrixXd y = es.eigenvectors().rowwise().reverse();
    ritz = basis.v() * y;
    op_ritz = basis.w() * y;

    worst = 0.0;
    converged = true;
    for (int i = 0; i < k; ++i) {
      const double res = m_norm(mass, op_ritz.col(i) - theta[i] * ritz.col(i)) / std::abs(theta[i]);
      worst = std::max(worst, res);
      if (!(res <= opt.tolerance)) converged = false;
    }
    if (converged || basis.size() >= n || next.cols() == 0) break;
    if (capacity - next.cols() < k) throw NumericalError("eigensolver: search space too small for k");
    // Residuals stop improving once rounding in the stored operator images
    // dominates; give up rather than cycle until the budget runs out.
    if (worst < best) {
      best = worst;
      stale = 0;
    } else if (++stale >= 20) {
      std::ostringstream msg;
      msg << "eigensolver: stagnated at attained residual " << best << " (tolerance " << opt.tolerance << ")";
      throw NumericalError(msg.str());
    }
    if (iterations >= max_iter) {
      std::ostringstream msg;
      msg << "eigensolver: no convergence after " << iterations << " block iterations (attained residual "
          << worst << ")";
      throw NumericalError(msg.str());
    }

    // Thick restart: keep the leading Ritz vectors and continue from the
    // pending block, which is orthogonal to the whole old basis.
    const long keep = std::min<long>(capacity - next.cols(), std::max<long>(k + b, (m + k) / 2));
    basis.reset(ritz.leftCols(keep), op_ritz.leftCols(keep));
    next = orthonormal_block(next);
  }

  EigsResult result;
  result.iterations = iterations;
  std::vector<std::pair<double, long>> order;
  for (int i = 0; i < k; ++i) order.emplace_back(sigma + 1.0 / theta[i], i);
  std::sort(order.begin(), order.end());
  result.values.resize(k);
  result.vectors.resize(n, k);
  for (int i = 0; i < k; ++i) {
    result.values[i] = order[i].first;
    Eigen::VectorXd x = ritz.col(order[i].second);
    x /= m_norm(mass, x);
    const double tiny = 1e-6 * x.cwiseAbs().maxCoeff();
    for (long r = 0; r < n; ++r) {
      if (std::abs(x[r]) > tiny) {
        if (x[r] < 0) x = -x;
        break;
      }
    }
    result.vectors.col(i) = x;
  }
  const Eigen::MatrixXd resid =
      stiffness * result.vectors - mass.asDiagonal() * result.vectors * result.values.asDiagonal();
  result.max_residual = resid.colwise().norm().maxCoeff();
  if (!converged && !(basis.size() >= n)) {
    std::ostringstream msg;
    msg << "eigensolver: stalled with attained residual " << worst;
    throw NumericalError(msg.str());
  }
  return result;
}

}  // namespace rino
