#include "rino/selfcheck.hpp"

#include "rino/error.hpp"
#include "rino/eval.hpp"
#include "rino/maps.hpp"
#include "rino/rinonet.hpp"
#include "rino/rotations.hpp"
#include "rino/synthetic.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <algorithm>
#include <functional>
#include <limits>
#include <random>
#include <sstream>

namespace rino {
namespace {

using ad::Tensor;

double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / std::max(b.norm(), 1e-300);
}

Eigen::MatrixXd gaussian(long rows, long cols, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (long i = 0; i < m.size(); ++i) m(i) = g(rng);
  return m;
}

// Maximum that propagates NaN, so a broken evaluation cannot hide.
double worse(double a, double b) { return (std::isnan(a) || std::isnan(b)) ? std::numeric_limits<double>::quiet_NaN() : std::max(a, b); }

CheckResult make(const std::string& name, double value, double tol, std::string detail = {}) {
  return {name, std::isfinite(value) && value <= tol, value, tol, std::move(detail)};
}

CheckResult guarded(const std::string& name, double tol, const std::function<CheckResult()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    return {name, false, std::numeric_limits<double>::quiet_NaN(), tol, std::string("exception: ") + e.what()};
  }
}

Mesh check_mesh(std::uint64_t seed) {
  SyntheticParams sp;
  sp.subdivisions = 2;
  sp.jitter = 0.05;
  return normalize_unit_area(gen_synthetic(SyntheticKind::kEllipsoid, sp, seed).mesh);
}

// Dense normal equations of ||C A - B||^2 + gamma sum D_ij C_ij^2 over vec(C).
Eigen::MatrixXd dense_ridge_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& d,
                                   double gamma) {
  const long ky = b.rows();
  const long kx = a.rows();
  const Eigen::MatrixXd aat = a * a.transpose();
  Eigen::MatrixXd big = Eigen::MatrixXd::Zero(ky * kx, ky * kx);
  for (long j = 0; j < kx; ++j) {
    for (long l = 0; l < kx; ++l) big.block(l * ky, j * ky, ky, ky).diagonal().setConstant(aat(l, j));
  }
  for (long j = 0; j < kx; ++j) {
    for (long i = 0; i < ky; ++i) big(j * ky + i, j * ky + i) += gamma * d(i, j);
  }
  const Eigen::MatrixXd rhs = b * a.transpose();
  const Eigen::VectorXd x = big.ldlt().solve(Eigen::Map<const Eigen::VectorXd>(rhs.data(), rhs.size()));
  return Eigen::Map<const Eigen::MatrixXd>(x.data(), ky, kx);
}

}  // namespace

std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& options) {
  std::vector<CheckResult> out;
  std::mt19937_64 rng(options.seed);
  ForwardOptions fwd;
  fwd.mutate_gradient_sign = options.inject_sign_flip;
  const NetworkParams params = init_params(options.seed);
  const PipelineConfig pipe{40, 20};
  const Mesh mesh = check_mesh(options.seed);

  out.push_back(guarded("network rotation invariance", 1e-4, [&] {
    const ShapeData base = prepare_shape(mesh, pipe, params.config.knn);
    const Eigen::MatrixXd f0 = compute_features(params, base, fwd);
    double worst = 0.0;
    for (int r = 0; r < 3; ++r) {
      const Mesh m = transformed(mesh, random_rotation(rng));
      worst = worse(worst, rel(compute_features(params, prepare_shape(m, pipe, params.config.knn), fwd), f0));
    }
    return make("network rotation invariance", worst, 1e-4, "3 rotations, 162 vertices");
  }));

  out.push_back(guarded("gradient aggregate invariance", 1e-10, [&] {
    const long c = 8;
    double worst = 0.0;
    for (int r = 0; r < 20; ++r) {
      Eigen::MatrixXcd w(30, 3 * c);
      w.real() = gaussian(30, 3 * c, rng);
      w.imag() = gaussian(30, 3 * c, rng);
      Eigen::MatrixXcd a(c, c);
      a.real() = gaussian(c, c, rng);
      a.imag() = gaussian(c, c, rng);
      const Eigen::Matrix3d rot = random_rotation(rng);
      ad::Tape tape;
      const Tensor ta = tape.constant(a);
      const Eigen::MatrixXd f0 = vn_gradient_aggregate(tape.constant(w), ta, fwd).re();
      const Eigen::MatrixXd f1 = vn_gradient_aggregate(tape.constant(rotate_vn(w, rot)), ta, fwd).re();
      worst = worse(worst, rel(f1, f0));
    }
    return make("gradient aggregate invariance", worst, 1e-10, "20 rotations, random complex A");
  }));

  out.push_back(guarded("layer equivariance", 1e-9, [&] {
    const ShapeData s0 = prepare_shape(mesh, pipe, params.config.knn);
    const Eigen::Matrix3d rot = random_rotation(rng);
    const ShapeData s1 = prepare_shape(transformed(mesh, rot), pipe, params.config.knn);
    const long c = params.config.channels;
    const Eigen::MatrixXd u = gaussian(mesh.num_vertices(), 3 * c, rng);
    const Eigen::MatrixXd ur = rotate_vn(u, rot);
    ad::Tape tape;
    const ParamVars p = attach_params(tape, params, false);
    double worst = 0.0;
    auto track = [&](const Eigen::MatrixXd& rotated_out, const Eigen::MatrixXd& out0) {
      worst = worse(worst, rel(rotated_out, rotate_vn(out0, rot)));
    };
    track(ad::vn_linear(tape.constant(ur), p.at("lift.w")).re(), ad::vn_linear(tape.constant(u), p.at("lift.w")).re());
    track(vn_relu(tape.constant(ur), p.at("inv.k")).re(), vn_relu(tape.constant(u), p.at("inv.k")).re());
    track(vn_diffusion(s0.bundle.basis, tape.constant(ur), p.at("block0.theta")).re(),
          vn_diffusion(s0.bundle.basis, tape.constant(u), p.at("block0.theta")).re());
    track(vn_edgeconv(p, s1).re(), vn_edgeconv(p, s0).re());
    track(rino_block(p, 0, s1, tape.constant(ur), fwd).re(), rino_block(p, 0, s0, tape.constant(u), fwd).re());
    return make("layer equivariance", worst, 1e-9, "linear, relu, diffusion, edgeconv, block");
  }));

  out.push_back(guarded("gradient checks", 1e-5, [&] {
    ad::GradCheckOptions gc;
    gc.seed = options.seed;
    double worst = 0.0;
    auto run = [&](const ad::ScalarFn& f, const std::vector<Eigen::MatrixXd>& in) {
      worst = worse(worst, ad::gradient_check(f, in, gc).max_rel_error);
    };
    const Eigen::MatrixXd mask = gaussian(4, 5, rng).cwiseAbs();
    const Eigen::MatrixXd probe = gaussian(4, 4, rng);
    run([&](ad::Tape&, const std::vector<Tensor>& v) {
          return ad::sum_sq(ad::ridge_solve(ad::make_complex(v[0], v[1]), ad::make_complex(v[2], v[3]), mask, 0.1));
        },
        {gaussian(5, 7, rng), gaussian(5, 7, rng), gaussian(4, 7, rng), gaussian(4, 7, rng)});
    run([&](ad::Tape& t, const std::vector<Tensor>& v) {
          const Tensor q = ad::unitary_polar(ad::make_complex(v[0], v[1]));
          return ad::sum_all(ad::real_part(ad::mul(q, t.constant(probe))));
        },
        {gaussian(4, 4, rng), gaussian(4, 4, rng)});
    run([&](ad::Tape&, const std::vector<Tensor>& v) { return ad::sum_sq(vn_relu(v[0], v[1])); },
        {gaussian(6, 9, rng), gaussian(3, 3, rng)});
    run([&](ad::Tape&, const std::vector<Tensor>& v) { return ad::sum_sq(ad::softmax_rows(v[0], 0.5)); },
        {gaussian(5, 6, rng)});
    return make("gradient checks", worst, 1e-5, "ridge, polar, vn_relu, softmax");
  }));

  out.push_back(guarded("fmap solver oracle", 1e-10, [&] {
    const Eigen::MatrixXd a = gaussian(8, 12, rng);
    const Eigen::MatrixXd b = gaussian(7, 12, rng);
    Eigen::VectorXd ex = gaussian(8, 1, rng).cwiseAbs();
    Eigen::VectorXd ey = gaussian(7, 1, rng).cwiseAbs();
    std::sort(ex.data(), ex.data() + ex.size());
    std::sort(ey.data(), ey.data() + ey.size());
    const Eigen::MatrixXd c = solve_fmap(a, b, ex, ey, 0.3);
    const Eigen::MatrixXd oracle = dense_ridge_oracle(a, b, commutativity_mask(ex, ey), 0.3);
    return make("fmap solver oracle", rel(c, oracle), 1e-10, "k = 8 x 7 dense normal equations");
  }));

  out.push_back(guarded("c_to_q unitarity", 1e-10, [&] {
    Eigen::MatrixXcd tx(6, 9), ty(6, 9);
    tx.real() = gaussian(6, 9, rng);
    tx.imag() = gaussian(6, 9, rng);
    ty.real() = gaussian(6, 9, rng);
    ty.imag() = gaussian(6, 9, rng);
    const Eigen::MatrixXcd q = c_to_q(gaussian(9, 9, rng), tx, ty).q;
    const double err = (q.adjoint() * q - Eigen::MatrixXcd::Identity(6, 6)).norm();
    return make("c_to_q unitarity", err, 1e-10);
  }));

  out.push_back(guarded("eigensolver residual", 1e-8, [&] {
    const Operators ops = build_operators(mesh);
    const SpectralBasis b = eig_generalized(ops.stiffness, ops.mass, 30);
    const Eigen::MatrixXd lphi = ops.stiffness * b.evecs;
    const Eigen::MatrixXd mphi = ops.mass.asDiagonal() * b.evecs;
    double res = 0.0;
    for (int j = 0; j < b.size(); ++j) {
      res = std::max(res, (lphi.col(j) - b.evals[j] * mphi.col(j)).norm() / std::max(lphi.col(j).norm(), mphi.col(j).norm()));
    }
    const double orth = (b.evecs.transpose() * mphi - Eigen::MatrixXd::Identity(b.size(), b.size())).cwiseAbs().maxCoeff();
    std::ostringstream d;
    d << "residual " << res << ", M-orthonormality " << orth;
    return make("eigensolver residual", std::max(res, orth), 1e-8, d.str());
  }));

  return out;
}

}  // namespace rino
