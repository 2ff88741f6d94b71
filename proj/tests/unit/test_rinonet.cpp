#include "rino/error.hpp"
#include "rino/eval.hpp"
#include "rino/rinonet.hpp"
#include "rino/rotations.hpp"
#include "rino/synthetic.hpp"
#include "test_util.hpp"

#include <unsupported/Eigen/MatrixFunctions>
#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <sstream>

using namespace rino;
using ad::Tape;
using ad::Tensor;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.channels = 8;
  c.blocks = 2;
  c.out_dim = 16;
  c.mlp_hidden = 12;
  c.knn = 8;
  return c;
}

Mesh test_mesh(std::uint64_t seed, int subdivisions = 2) {
  SyntheticParams p;
  p.subdivisions = subdivisions;
  p.jitter = 0.06;
  return normalize_unit_area(gen_synthetic(SyntheticKind::kEllipsoid, p, seed).mesh);
}

ShapeData shape(const Mesh& m, int knn = 8) { return prepare_shape(m, {24, 8}, knn); }

double rel(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) { return test::rel_diff(a, b); }

}  // namespace

TEST(VnLinear, IdentityWeightsAreIdentity) {
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd u = test::gaussian(7, 12, rng);
  Tape tape;
  EXPECT_TRUE(ad::vn_linear(tape.constant(u), tape.constant(Eigen::MatrixXd::Identity(4, 4))).re() == u);
}

TEST(VnLinear, MatchesLoopOracle) {
  std::mt19937_64 rng(2);
  const long n = 5, cin = 4, cout = 3;
  const Eigen::MatrixXd u = test::gaussian(n, 3 * cin, rng);
  const Eigen::MatrixXd w = test::gaussian(cout, cin, rng);
  Tape tape;
  const Eigen::MatrixXd got = ad::vn_linear(tape.constant(u), tape.constant(w)).re();
  ASSERT_EQ(got.cols(), 3 * cout);
  for (long i = 0; i < n; ++i) {
    for (int d = 0; d < 3; ++d) {
      for (long o = 0; o < cout; ++o) {
        double acc = 0.0;
        for (long c = 0; c < cin; ++c) acc += w(o, c) * u(i, d * cin + c);
        EXPECT_NEAR(got(i, d * cout + o), acc, 1e-13);
      }
    }
  }
}

TEST(VnLinear, Equivariant) {
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd u = test::gaussian(20, 15, rng);
  const Eigen::MatrixXd w = test::gaussian(6, 5, rng);
  for (int r = 0; r < 20; ++r) {
    const Eigen::Matrix3d rot = random_rotation(rng);
    Tape tape;
    const Tensor tw = tape.constant(w);
    const Eigen::MatrixXd a = ad::vn_linear(tape.constant(rotate_vn(u, rot)), tw).re();
    const Eigen::MatrixXd b = rotate_vn(ad::vn_linear(tape.constant(u), tw).re(), rot);
    EXPECT_LE(rel(a, b), 1e-12);
  }
}

TEST(VnRelu, AlignedAndOpposedDirections) {
  Tape tape;
  Eigen::MatrixXd u(1, 3);
  u << 0.3, -1.2, 2.0;
  // With k = u W and W = I, the learned direction equals v.
  EXPECT_TRUE(vn_relu(tape.constant(u), tape.constant(Eigen::MatrixXd::Identity(1, 1))).re() == u);
  // W = -I points k opposite to v, removing it entirely.
  EXPECT_LE(vn_relu(tape.constant(u), tape.constant(Eigen::MatrixXd(-Eigen::MatrixXd::Identity(1, 1)))).re().norm(),
            1e-15);
}

TEST(VnRelu, EquivariantOverManyRotations) {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd u = test::gaussian(30, 18, rng);
  const Eigen::MatrixXd k = test::gaussian(6, 6, rng);
  Tape base;
  const Eigen::MatrixXd out = vn_relu(base.constant(u), base.constant(k)).re();
  for (int r = 0; r < 100; ++r) {
    const Eigen::Matrix3d rot = random_rotation(rng);
    Tape tape;
    EXPECT_LE(rel(vn_relu(tape.constant(rotate_vn(u, rot)), tape.constant(k)).re(), rotate_vn(out, rot)), 1e-10);
  }
}

TEST(VnConcat, InterleavesByVnDimension) {
  Tape tape;
  Eigen::MatrixXd a(1, 3), b(1, 6);
  a << 1, 2, 3;
  b << 10, 11, 20, 21, 30, 31;
  Eigen::MatrixXd expected(1, 9);
  expected << 1, 10, 11, 2, 20, 21, 3, 30, 31;
  EXPECT_TRUE(vn_concat({tape.constant(a), tape.constant(b)}).re() == expected);
}

TEST(EdgeConv, TranslationInvariantAndRotationEquivariant) {
  const Mesh m = test_mesh(5);
  const NetworkParams params = init_params(5, small_config());
  std::mt19937_64 rng(5);
  const ShapeData s0 = shape(m);
  Tape tape;
  const ParamVars p = attach_params(tape, params, false);
  const Eigen::MatrixXd out0 = vn_edgeconv(p, s0).re();
  const ShapeData moved = shape(transformed(m, Eigen::Matrix3d::Identity(), Eigen::Vector3d(3.0, -1.0, 0.5)));
  EXPECT_LE(rel(vn_edgeconv(p, moved).re(), out0), 1e-12);
  for (int r = 0; r < 5; ++r) {
    const Eigen::Matrix3d rot = random_rotation(rng);
    const ShapeData rs = shape(transformed(m, rot));
    EXPECT_LE(rel(vn_edgeconv(p, rs).re(), rotate_vn(out0, rot)), 1e-10);
  }
}

TEST(EdgeConv, CoincidentPointsStayFinite) {
  // Two triangles whose free corners coincide in space.
  Points v(5, 3);
  v << 0, 0, 0, 1, 0, 0, 0.5, 1, 0, 0.5, 1, 0, 0.5, -1, 0.2;
  Triangles t(3, 3);
  t << 0, 1, 2, 1, 0, 4, 0, 3, 1;
  const Mesh m(v, t);
  const NetworkParams params = init_params(6, small_config());
  const ShapeData s = make_shape_data(m, build_shape_bundle(m, 2, 2), 3);
  Tape tape;
  const ParamVars p = attach_params(tape, params, false);
  const Eigen::MatrixXd out = vn_edgeconv(p, s).re();
  EXPECT_TRUE(out.allFinite());
  EXPECT_EQ(out.rows(), 5);
  // Vertices 2 and 3 share a position and therefore a neighborhood geometry.
  EXPECT_LE((out.row(2) - out.row(3)).norm(), 1e-12 * std::max(1.0, out.row(2).norm()));
}

TEST(VnDiffusion, VeryNegativeThetaIsProjection) {
  const Mesh m = test_mesh(7);
  const ShapeData s = shape(m);
  std::mt19937_64 rng(7);
  const Eigen::MatrixXd u = test::gaussian(m.num_vertices(), 6, rng);
  Tape tape;
  const Eigen::MatrixXd h = vn_diffusion(s.bundle.basis, tape.constant(u), tape.constant(Eigen::MatrixXd::Constant(1, 2, -60.0))).re();
  EXPECT_LE(rel(h, s.bundle.basis.evecs * (s.bundle.basis.pinv() * u)), 1e-12);
}

TEST(VnDiffusion, Equivariant) {
  const Mesh m = test_mesh(8);
  const ShapeData s = shape(m);
  std::mt19937_64 rng(8);
  const Eigen::MatrixXd u = test::gaussian(m.num_vertices(), 12, rng);
  const Eigen::MatrixXd theta = test::gaussian(1, 4, rng).array() - 4.0;
  Tape tape;
  const Tensor th = tape.constant(theta);
  const Eigen::MatrixXd h = vn_diffusion(s.bundle.basis, tape.constant(u), th).re();
  for (int r = 0; r < 10; ++r) {
    const Eigen::Matrix3d rot = random_rotation(rng);
    EXPECT_LE(rel(vn_diffusion(s.bundle.basis, tape.constant(rotate_vn(u, rot)), th).re(), rotate_vn(h, rot)), 1e-10);
  }
}

TEST(VnDiffusion, MatchesDenseExponentialWithFullBasis) {
  SyntheticParams p;
  p.segments = 7;
  p.ring_vertices = 12;
  const Mesh m = normalize_unit_area(gen_synthetic(SyntheticKind::kBentBar, p, 1).mesh);
  const int n = m.num_vertices();
  ASSERT_LE(n, 100);
  const Operators ops = build_operators(m);
  const SpectralBasis basis = eig_generalized(ops.stiffness, ops.mass, n);
  std::mt19937_64 rng(9);
  const Eigen::MatrixXd u = test::gaussian(n, 3, rng);
  const double t = 0.01;
  Tape tape;
  const Eigen::MatrixXd h =
      vn_diffusion(basis, tape.constant(u), tape.constant(Eigen::MatrixXd::Constant(1, 1, std::log(t)))).re();
  const Eigen::VectorXd sq = ops.mass.cwiseSqrt();
  const Eigen::MatrixXd s = sq.cwiseInverse().asDiagonal() * Eigen::MatrixXd(ops.stiffness) * sq.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd oracle = sq.cwiseInverse().asDiagonal() * ((-t * s).exp() * (sq.asDiagonal() * u));
  EXPECT_LE(rel(h, oracle), 1e-6);
}

TEST(VnGradient, ConstantFeatureGivesZero) {
  const Mesh m = test_mesh(10);
  const ShapeData s = shape(m);
  std::mt19937_64 rng(10);
  const long c = 4;
  Eigen::MatrixXd h(m.num_vertices(), 3 * c);
  const Eigen::MatrixXd row = test::gaussian(1, 3 * c, rng);
  h = row.replicate(m.num_vertices(), 1);
  Tape tape;
  const GradientLayerOut out =
      vn_gradient(s, tape.constant(h), tape.constant(test::gaussian(c, c, rng)), tape.constant(test::gaussian(c, c, rng)));
  EXPECT_LE(out.f.re().cwiseAbs().maxCoeff(), 1e-18);
  EXPECT_LE(out.g.re().cwiseAbs().maxCoeff(), 1e-18);
  EXPECT_LE(out.e.re().cwiseAbs().maxCoeff(), 1e-18);
}

TEST(VnGradient, AggregateInvariantAndOutputEquivariant) {
  const Mesh m = test_mesh(11);
  std::mt19937_64 rng(11);
  const long c = 5;
  const Eigen::MatrixXd h = test::gaussian(m.num_vertices(), 3 * c, rng);
  const Eigen::MatrixXd are = test::gaussian(c, c, rng), aim = test::gaussian(c, c, rng);
  const ShapeData s = shape(m);
  Tape tape;
  const GradientLayerOut base = vn_gradient(s, tape.constant(h), tape.constant(are), tape.constant(aim));
  for (int r = 0; r < 10; ++r) {
    const Eigen::Matrix3d rot = random_rotation(rng);
    const GradientLayerOut o = vn_gradient(s, tape.constant(rotate_vn(h, rot)), tape.constant(are), tape.constant(aim));
    EXPECT_LE(rel(o.f.re(), base.f.re()), 1e-10);
    EXPECT_LE(rel(o.e.re(), rotate_vn(base.e.re(), rot)), 1e-10);
  }
  // Random complex w, not just gradients of real fields.
  const Eigen::MatrixXcd w = test::complex_gaussian(40, 3 * c, rng);
  const Eigen::MatrixXcd a = test::complex_gaussian(c, c, rng);
  const Eigen::MatrixXd f0 = vn_gradient_aggregate(tape.constant(w), tape.constant(a)).re();
  for (int r = 0; r < 100; ++r) {
    const Eigen::Matrix3d rot = random_rotation(rng);
    EXPECT_LE(rel(vn_gradient_aggregate(tape.constant(rotate_vn(w, rot)), tape.constant(a)).re(), f0), 1e-10);
  }
}

TEST(VnGradient, SignFlipMutationBreaksInvariance) {
  std::mt19937_64 rng(12);
  const Eigen::MatrixXcd w = test::complex_gaussian(40, 12, rng);
  const Eigen::MatrixXcd a = test::complex_gaussian(4, 4, rng);
  ForwardOptions bad;
  bad.mutate_gradient_sign = true;
  Tape tape;
  const Eigen::MatrixXd f0 = vn_gradient_aggregate(tape.constant(w), tape.constant(a), bad).re();
  const Eigen::MatrixXd f1 = vn_gradient_aggregate(tape.constant(rotate_vn(w, random_rotation(rng))), tape.constant(a), bad).re();
  EXPECT_GT(rel(f1, f0), 1e-3);
}

TEST(RinoBlock, ZeroInputGivesZero) {
  const Mesh m = test_mesh(13);
  const NetworkParams params = init_params(13, small_config());
  const ShapeData s = shape(m);
  Tape tape;
  const ParamVars p = attach_params(tape, params, false);
  const Eigen::MatrixXd u = Eigen::MatrixXd::Zero(m.num_vertices(), 3 * 8);
  EXPECT_EQ(rino_block(p, 0, s, tape.constant(u)).re().cwiseAbs().maxCoeff(), 0.0);
}

TEST(RinoBlock, ZeroMlpIsResidual) {
  const Mesh m = test_mesh(14);
  NetworkParams params = init_params(14, small_config());
  params.tensors.at("block1.mlp2.w").setZero();
  const ShapeData s = shape(m);
  std::mt19937_64 rng(14);
  const Eigen::MatrixXd u = test::gaussian(m.num_vertices(), 24, rng);
  Tape tape;
  const ParamVars p = attach_params(tape, params, false);
  EXPECT_TRUE(rino_block(p, 1, s, tape.constant(u)).re() == u);
}

TEST(RinoBlock, EquivariantOverSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Mesh m = test_mesh(100 + seed);
    const NetworkParams params = init_params(seed, small_config());
    std::mt19937_64 rng(seed);
    const Eigen::Matrix3d rot = random_rotation(rng);
    const ShapeData s0 = shape(m), s1 = shape(transformed(m, rot));
    const Eigen::MatrixXd u = test::gaussian(m.num_vertices(), 24, rng);
    Tape tape;
    const ParamVars p = attach_params(tape, params, false);
    const Eigen::MatrixXd d0 = rino_block(p, 0, s0, tape.constant(u)).re();
    const Eigen::MatrixXd d1 = rino_block(p, 0, s1, tape.constant(rotate_vn(u, rot))).re();
    EXPECT_LE(rel(d1, rotate_vn(d0, rot)), 1e-9) << "seed " << seed;
  }
}

TEST(Forward, RotationInvariant) {
  const Mesh m = test_mesh(15);
  const NetworkParams params = init_params(15, small_config());
  const Eigen::MatrixXd f0 = compute_features(params, shape(m));
  EXPECT_EQ(f0.cols(), 16);
  std::mt19937_64 rng(15);
  for (int r = 0; r < 5; ++r) {
    const Mesh rm = transformed(m, random_rotation(rng), Eigen::Vector3d(0.2, 0.0, -1.0));
    EXPECT_LE(rel(compute_features(params, shape(rm)), f0), 1e-4);
  }
}

TEST(Forward, DefaultConfigInvariantOnSmallMesh) {
  const Mesh m = test_mesh(16, 1);
  const NetworkParams params = init_params(16);
  const Eigen::MatrixXd f0 = compute_features(params, prepare_shape(m, {20, 8}, 16));
  EXPECT_EQ(f0.cols(), 256);
  std::mt19937_64 rng(16);
  const Mesh rm = transformed(m, random_rotation(rng));
  EXPECT_LE(rel(compute_features(params, prepare_shape(rm, {20, 8}, 16)), f0), 1e-4);
}

TEST(Forward, PermutingVerticesPermutesRows) {
  const Mesh m = test_mesh(17);
  std::vector<int> perm(m.num_vertices());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(17));
  const NetworkParams params = init_params(17, small_config());
  const Eigen::MatrixXd f0 = compute_features(params, shape(m));
  const Eigen::MatrixXd f1 = compute_features(params, shape(permuted(m, perm)));
  Eigen::MatrixXd expected(f1.rows(), f1.cols());
  for (int i = 0; i < m.num_vertices(); ++i) expected.row(i) = f0.row(perm[i]);
  EXPECT_LE(rel(f1, expected), 1e-8);
}

TEST(Params, CountNearReferenceConfiguration) {
  const long count = count_params(NetworkConfig{});
  EXPECT_NEAR(static_cast<double>(count), 327714.0, 0.1 * 327714.0);
  EXPECT_EQ(init_params(0).count(), count);
}

TEST(Params, EqualSeedsGiveEqualParameters) {
  EXPECT_TRUE(init_params(42, small_config()) == init_params(42, small_config()));
  EXPECT_FALSE(init_params(42, small_config()) == init_params(43, small_config()));
}

TEST(Params, InitializationScales) {
  const NetworkParams p = init_params(3);
  const double bound = 1.2 / std::sqrt(42.0);
  EXPECT_LE(p.tensors.at("lift.w").cwiseAbs().maxCoeff(), bound);
  EXPECT_GT(p.tensors.at("lift.w").cwiseAbs().maxCoeff(), 0.9 * bound);
  const Eigen::MatrixXd a = p.tensors.at("block0.a_re");
  EXPECT_LE((a - Eigen::MatrixXd::Identity(42, 42)).cwiseAbs().maxCoeff(), 0.1);
  EXPECT_LE(p.tensors.at("block0.a_im").cwiseAbs().maxCoeff(), 0.1);
  // Diffusion time of the order of the squared edge length of a unit-area mesh.
  const double t = std::exp(p.tensors.at("block0.theta").mean());
  EXPECT_GT(t, 1e-5);
  EXPECT_LT(t, 1e-2);
}

TEST(Params, SaveLoadSaveIsByteIdentical) {
  test::TempDir dir("params");
  const NetworkParams p = init_params(9, small_config());
  save_params(p, dir / "a.bin");
  const NetworkParams q = load_params(dir / "a.bin");
  EXPECT_TRUE(q == p);
  save_params(q, dir / "b.bin");
  std::ifstream a(dir / "a.bin", std::ios::binary), b(dir / "b.bin", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  EXPECT_EQ(sa.str(), sb.str());
}

TEST(Params, VersionMismatchIsRejected) {
  test::TempDir dir("params");
  ArrayArchive a = params_to_archive(init_params(1, small_config()));
  a.version = kParamsVersion + 1;
  a.save(dir / "v.bin");
  EXPECT_THROW(load_params(dir / "v.bin"), DataError);
}

TEST(Params, InvalidConfigIsRejected) {
  NetworkConfig c = small_config();
  c.channels = 0;
  EXPECT_THROW(init_params(0, c), UsageError);
}
