#include "rino/error.hpp"
#include "rino/eval.hpp"
#include "rino/maps.hpp"
#include "rino/rotations.hpp"
#include "rino/synthetic.hpp"
#include "rino/training.hpp"
#include "test_util.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

using namespace rino;
using ad::Tape;
using ad::Tensor;

namespace {

NetworkConfig small_network() {
  NetworkConfig c;
  c.channels = 6;
  c.blocks = 1;
  c.out_dim = 12;
  c.mlp_hidden = 6;
  c.knn = 6;
  return c;
}

// 62-vertex bent bars; members of one family share vertex labels.
Mesh small_bar(double bend, std::uint64_t seed) {
  SyntheticParams p;
  p.segments = 4;
  p.ring_vertices = 12;
  p.bend_angle = bend;
  return normalize_unit_area(perturb_gaussian(gen_synthetic(SyntheticKind::kBentBar, p, 0).mesh, 0.002, seed));
}

ShapeData small_shape(const Mesh& m) { return prepare_shape(m, {20, 10}, 6); }

const std::vector<ShapeData>& shapes() {
  static const std::vector<ShapeData> s = [] {
    std::vector<ShapeData> out;
    for (int i = 0; i < 3; ++i) out.push_back(small_shape(small_bar(0.3 * i, 10 + i)));
    return out;
  }();
  return s;
}

TrainConfig small_train_config() {
  TrainConfig c;
  c.network = small_network();
  c.iterations = 6;
  c.seed = 5;
  c.lr = 1e-2;
  c.checkpoint_every = 0;
  return c;
}

double term_value(const StepReport& r, const std::string& name) {
  for (const auto& [n, v] : r.terms) {
    if (n == name) return v;
  }
  return 0.0;
}

}  // namespace

TEST(Losses, Orthogonality) {
  Tape tape;
  EXPECT_EQ(loss_orth(tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Identity(4, 4)))).item(), 0.0);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(2, 2);
  d.diagonal() << 2.0, 1.0;
  EXPECT_DOUBLE_EQ(loss_orth(tape.constant(d)).item(), 9.0);
  std::mt19937_64 rng(1);
  const Eigen::MatrixXd q = test::gaussian(6, 6, rng).householderQr().householderQ();
  EXPECT_LE(loss_orth(tape.constant(q)).item(), 1e-12);
  // Complex maps use the conjugate transpose: a diagonal phase matrix is unitary.
  Eigen::MatrixXcd u = Eigen::MatrixXcd::Zero(3, 3);
  for (int i = 0; i < 3; ++i) u(i, i) = std::polar(1.0, 0.4 * (i + 1));
  EXPECT_LE(loss_orth(tape.constant(u)).item(), 1e-24);
}

TEST(Losses, Bijectivity) {
  Tape tape;
  std::mt19937_64 rng(2);
  const Eigen::MatrixXd a = test::gaussian(4, 4, rng);
  EXPECT_LE(loss_bij(tape.constant(a), tape.constant(Eigen::MatrixXd(a.inverse()))).item(), 1e-20);
  const Tensor i3 = tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Identity(3, 3)));
  EXPECT_EQ(loss_bij(i3, i3).item(), 0.0);
  EXPECT_DOUBLE_EQ(loss_bij(tape.constant(Eigen::MatrixXd(2.0 * Eigen::MatrixXd::Identity(3, 3))), i3).item(), 3.0);
}

TEST(Losses, CouplingVanishesForIdentityOnIdenticalShapes) {
  const ShapeData& s = shapes()[0];
  const long n = s.mesh.num_vertices();
  Tape tape;
  const Tensor c_hat = maps_ad::pi_to_c(tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Identity(n, n))), s.bundle.basis,
                                        s.bundle.basis);
  const Tensor eye_c = tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Identity(c_hat.rows(), c_hat.cols())));
  EXPECT_LE(ad::sum_sq(ad::sub(eye_c, c_hat)).item(), 1e-10);
  const Eigen::MatrixXcd t = gradient_transfer(s.bundle);
  const Tensor q_hat = maps_ad::c_to_q(c_hat, t, t);
  const long kq = q_hat.rows();
  const Tensor eye_q = tape.constant(Eigen::MatrixXcd(Eigen::MatrixXcd::Identity(kq, kq)));
  EXPECT_LE(ad::sum_sq(ad::sub(eye_q, q_hat)).item(), 1e-10);
}

TEST(Losses, ContrastiveWithEigenfunctionFeatures) {
  const ShapeData s = small_shape(small_bar(0.0, 1));
  ObjectiveConfig cfg;
  cfg.tau = 1e-3;
  cfg.toggles = {false, false, true, false, false, false};
  Tape tape;
  const Tensor f = tape.constant(s.bundle.basis.evecs);
  const PairObjective obj = build_objective(f, f, s, s, cfg);
  ASSERT_EQ(obj.terms.size(), 2u);
  EXPECT_LE(obj.terms[0].second.item(), 1e-6);
}

TEST(Losses, ContrastiveWithConstantFeaturesIsUniformLimit) {
  const ShapeData s = prepare_shape(normalize_unit_area(icosphere(2)), {12, 4}, 6);
  ObjectiveConfig cfg;
  cfg.toggles = {false, false, true, false, false, false};
  Tape tape;
  const Tensor f = tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Ones(s.mesh.num_vertices(), 5)));
  const PairObjective obj = build_objective(f, f, s, s, cfg);
  // Uniform self-map: C_XX is E_00, so ||E_00 - I||^2 = k - 1.
  EXPECT_NEAR(obj.terms[0].second.item(), 11.0, 0.05);
  EXPECT_NEAR(obj.terms[1].second.item(), 11.0, 0.05);
}

TEST(Objective, DefaultsAndTermNames) {
  const LossWeights w;
  EXPECT_EQ(w.orth_c, 1.0);
  EXPECT_EQ(w.orth_q, 0.1);
  EXPECT_EQ(w.bij, 1.0);
  EXPECT_EQ(w.couple_c, 1.0);
  EXPECT_EQ(w.couple_q, 0.1);
  EXPECT_EQ(w.contr, 1.0);
  EXPECT_EQ(ObjectiveConfig{}.tau, 0.07);

  const NetworkParams params = init_params(3, small_network());
  const StepReport r = evaluate_objective(params, shapes()[0], shapes()[1], ObjectiveConfig{});
  std::vector<std::string> names;
  for (const auto& [n, v] : r.terms) names.push_back(n);
  EXPECT_EQ(names, (std::vector<std::string>{"orth_c_xy", "orth_c_yx", "orth_q_xy", "orth_q_yx", "bij_xy", "bij_yx",
                                             "pc_xy", "pc_yx", "pq_xy", "pq_yx", "contr_x", "contr_y"}));
}

TEST(Objective, TermsAreNonnegativeAndSumToTotal) {
  const NetworkParams params = init_params(4, small_network());
  ObjectiveConfig cfg;
  cfg.toggles.cq_coupling = true;
  const StepReport r = evaluate_objective(params, shapes()[0], shapes()[2], cfg);
  double sum = 0.0;
  for (const auto& [n, v] : r.terms) {
    EXPECT_GE(v, 0.0) << n;
    sum += v;
  }
  EXPECT_NEAR(r.total, sum, 1e-12 * std::max(1.0, r.total));
}

TEST(Objective, AllTogglesOffGivesZero) {
  ObjectiveConfig cfg;
  cfg.toggles = {false, false, false, false, false, false};
  const StepReport r = evaluate_objective(init_params(5, small_network()), shapes()[0], shapes()[1], cfg);
  EXPECT_EQ(r.total, 0.0);
  EXPECT_TRUE(r.terms.empty());
}

TEST(Objective, EachToggleRemovesExactlyItsTerms) {
  const NetworkParams params = init_params(6, small_network());
  ObjectiveConfig base;
  base.toggles.cq_coupling = true;
  const StepReport full = evaluate_objective(params, shapes()[0], shapes()[1], base);
  struct Case {
    std::function<void(LossToggles&)> off;
    std::set<std::string> removed;
  };
  const std::vector<Case> cases{
      {[](LossToggles& t) { t.structural = false; },
       {"orth_c_xy", "orth_c_yx", "orth_q_xy", "orth_q_yx", "bij_xy", "bij_yx"}},
      {[](LossToggles& t) { t.coupling = false; }, {"pc_xy", "pc_yx", "pq_xy", "pq_yx"}},
      {[](LossToggles& t) { t.contrastive = false; }, {"contr_x", "contr_y"}},
      {[](LossToggles& t) { t.q_branch = false; }, {"orth_q_xy", "orth_q_yx", "pq_xy", "pq_yx", "cq_xy", "cq_yx"}},
      {[](LossToggles& t) { t.pi_q = false; }, {"pq_xy", "pq_yx"}},
      {[](LossToggles& t) { t.cq_coupling = false; }, {"cq_xy", "cq_yx"}},
  };
  for (const auto& c : cases) {
    ObjectiveConfig cfg = base;
    c.off(cfg.toggles);
    const StepReport r = evaluate_objective(params, shapes()[0], shapes()[1], cfg);
    double removed = 0.0;
    for (const auto& name : c.removed) removed += term_value(full, name);
    EXPECT_GT(removed, 0.0);
    EXPECT_NEAR(full.total - r.total, removed, 1e-12 * std::max(1.0, full.total));
    for (const auto& [n, v] : r.terms) {
      EXPECT_EQ(c.removed.count(n), 0u) << n;
      EXPECT_DOUBLE_EQ(v, term_value(full, n)) << n;
    }
  }
}

TEST(Objective, ZeroWeightsRemoveCouplingExactly) {
  const NetworkParams params = init_params(7, small_network());
  const StepReport full = evaluate_objective(params, shapes()[1], shapes()[2], ObjectiveConfig{});
  ObjectiveConfig cfg;
  cfg.weights.couple_c = 0.0;
  cfg.weights.couple_q = 0.0;
  const StepReport r = evaluate_objective(params, shapes()[1], shapes()[2], cfg);
  const double coupling =
      term_value(full, "pc_xy") + term_value(full, "pc_yx") + term_value(full, "pq_xy") + term_value(full, "pq_yx");
  EXPECT_NEAR(full.total - r.total, coupling, 1e-12 * std::max(1.0, full.total));
}

TEST(Objective, RotationInvariant) {
  const NetworkParams params = init_params(8, small_network());
  std::mt19937_64 rng(8);
  const Mesh x = small_bar(0.0, 21), y = small_bar(0.4, 22);
  const double base = evaluate_objective(params, small_shape(x), small_shape(y), ObjectiveConfig{}).total;
  const double rotated = evaluate_objective(params, small_shape(transformed(x, random_rotation(rng))),
                                            small_shape(transformed(y, random_rotation(rng))), ObjectiveConfig{})
                             .total;
  EXPECT_NEAR(rotated, base, 1e-4 * base);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  const NetworkParams params = init_params(9, small_network());
  const ShapeData& x = shapes()[0];
  const ShapeData& y = shapes()[1];
  std::vector<std::string> names;
  std::vector<Eigen::MatrixXd> inputs;
  for (const auto& [n, m] : params.tensors) {
    names.push_back(n);
    inputs.push_back(m);
  }
  ad::GradCheckOptions opt;
  opt.max_coords = 12;
  const ad::GradCheckResult r = ad::gradient_check(
      [&](Tape& tape, const std::vector<Tensor>& v) {
        ParamVars p;
        for (std::size_t i = 0; i < names.size(); ++i) p.emplace(names[i], v[i]);
        (void)tape;
        const Tensor fx = rinonet_forward(p, params.config, x);
        const Tensor fy = rinonet_forward(p, params.config, y);
        return build_objective(fx, fy, x, y, ObjectiveConfig{}).total;
      },
      inputs, opt);
  EXPECT_EQ(r.nan_sites, 0);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(TrainStep, ZeroLearningRateKeepsParameters) {
  TrainConfig cfg = small_train_config();
  cfg.lr = 0.0;
  TrainState s = init_train_state(cfg);
  const NetworkParams before = s.params;
  train_step(s, shapes()[0], shapes()[1], cfg);
  EXPECT_TRUE(s.params == before);
  EXPECT_EQ(s.step, 1);
}

TEST(TrainStep, FirstAdamStepMovesBySignTimesLr) {
  TrainConfig cfg = small_train_config();
  TrainState s = init_train_state(cfg);
  const NetworkParams before = s.params;
  train_step(s, shapes()[0], shapes()[1], cfg);
  // Bias-corrected first step: |delta| = lr * |g| / (|g| + eps) <= lr.
  const Eigen::MatrixXd delta = s.params.tensors.at("lift.w") - before.tensors.at("lift.w");
  EXPECT_LE(delta.cwiseAbs().maxCoeff(), cfg.lr * (1.0 + 1e-12));
  EXPECT_GT(delta.cwiseAbs().maxCoeff(), 0.5 * cfg.lr);
}

TEST(TrainStep, GradientClippingRescalesToThreshold) {
  TrainConfig raw_cfg = small_train_config();
  raw_cfg.grad_clip = 0.0;
  TrainState raw = init_train_state(raw_cfg);
  const StepReport r0 = train_step(raw, shapes()[0], shapes()[1], raw_cfg);
  ASSERT_GT(r0.grad_norm, 0.0);

  TrainConfig clip_cfg = small_train_config();
  clip_cfg.grad_clip = 0.25 * r0.grad_norm;
  TrainState clipped = init_train_state(clip_cfg);
  const StepReport r1 = train_step(clipped, shapes()[0], shapes()[1], clip_cfg);
  EXPECT_EQ(r1.grad_norm, r0.grad_norm);

  double sq = 0.0;
  for (const auto& [name, m] : clipped.adam.m) {
    EXPECT_LE((m - 0.25 * raw.adam.m.at(name)).cwiseAbs().maxCoeff(), 1e-12 * (1.0 + m.cwiseAbs().maxCoeff()));
    sq += m.squaredNorm();
  }
  EXPECT_NEAR(std::sqrt(sq) / (1.0 - clip_cfg.beta1), clip_cfg.grad_clip, 1e-9 * clip_cfg.grad_clip);

  TrainConfig loose_cfg = small_train_config();
  loose_cfg.grad_clip = 2.0 * r0.grad_norm;
  TrainState loose = init_train_state(loose_cfg);
  train_step(loose, shapes()[0], shapes()[1], loose_cfg);
  EXPECT_TRUE(loose.params == raw.params);
}

TEST(TrainStep, NonFiniteLossIsNumericalError) {
  TrainConfig cfg = small_train_config();
  TrainState s = init_train_state(cfg);
  s.params.tensors.at("head.w")(0, 0) = std::nan("");
  EXPECT_THROW(train_step(s, shapes()[0], shapes()[1], cfg), NumericalError);
}

TEST(TrainLoop, EqualSeedsGiveIdenticalTrajectories) {
  const TrainConfig cfg = small_train_config();
  const std::vector<std::pair<int, int>> pairs{{0, 1}, {1, 2}, {0, 2}};
  std::vector<double> la, lb;
  TrainState a = init_train_state(cfg), b = init_train_state(cfg);
  train_loop(a, shapes(), pairs, cfg, [&](const StepReport& r) { la.push_back(r.total); });
  train_loop(b, shapes(), pairs, cfg, [&](const StepReport& r) { lb.push_back(r.total); });
  EXPECT_EQ(la, lb);
  EXPECT_TRUE(a.params == b.params);
  EXPECT_EQ(a.step, cfg.iterations);
}

TEST(TrainLoop, ResumeReproducesUninterruptedRun) {
  test::TempDir dir("resume");
  TrainConfig cfg = small_train_config();
  const std::vector<std::pair<int, int>> pairs{{0, 1}, {1, 2}, {0, 2}, {2, 0}};
  TrainState whole = init_train_state(cfg);
  train_loop(whole, shapes(), pairs, cfg);

  TrainConfig first = cfg;
  first.iterations = 3;
  first.checkpoint = dir / "ckpt.bin";
  first.loss_log = dir / "loss.csv";
  TrainState part = init_train_state(first);
  train_loop(part, shapes(), pairs, first);
  TrainState resumed = load_checkpoint(dir / "ckpt.bin");
  EXPECT_EQ(resumed.step, 3);
  TrainConfig second = first;
  second.iterations = cfg.iterations;
  train_loop(resumed, shapes(), pairs, second);
  EXPECT_TRUE(resumed.params == whole.params);
  for (const auto& [name, m] : whole.adam.m) EXPECT_TRUE(resumed.adam.m.at(name) == m) << name;

  // The log holds one total row per step across both runs.
  std::ifstream log(dir / "loss.csv");
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, "step,term,value");
  int totals = 0;
  while (std::getline(log, line)) totals += line.find(",total,") != std::string::npos;
  EXPECT_EQ(totals, cfg.iterations);
}

TEST(TrainLoop, EmptyDatasetAndBadPairsAreErrors) {
  TrainConfig cfg = small_train_config();
  TrainState s = init_train_state(cfg);
  EXPECT_THROW(train_loop(s, shapes(), {}, cfg), DataError);
  EXPECT_THROW(train_loop(s, shapes(), {{0, 7}}, cfg), DataError);
}

TEST(TrainLoop, NanAbortNamesLastCheckpoint) {
  test::TempDir dir("nan");
  TrainConfig cfg = small_train_config();
  cfg.checkpoint = dir / "ckpt.bin";
  cfg.iterations = 2;
  TrainState s = init_train_state(cfg);
  train_loop(s, shapes(), {{0, 1}}, cfg);
  s.params.tensors.at("head.w")(0, 0) = std::nan("");
  cfg.iterations = 4;
  try {
    train_loop(s, shapes(), {{0, 1}}, cfg);
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("ckpt.bin"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, RoundTripAndParamsOnlyRejection) {
  test::TempDir dir("ckpt");
  TrainConfig cfg = small_train_config();
  TrainState s = init_train_state(cfg);
  train_step(s, shapes()[0], shapes()[1], cfg);
  save_checkpoint(s, dir / "c.bin");
  const TrainState back = load_checkpoint(dir / "c.bin");
  EXPECT_TRUE(back.params == s.params);
  EXPECT_EQ(back.step, 1);
  for (const auto& [name, v] : s.adam.v) EXPECT_TRUE(back.adam.v.at(name) == v);
  EXPECT_FALSE(std::filesystem::exists(dir / "c.bin.tmp"));
  // A checkpoint is also a valid parameter file.
  EXPECT_TRUE(load_params(dir / "c.bin") == s.params);
  save_params(s.params, dir / "p.bin");
  EXPECT_THROW(load_checkpoint(dir / "p.bin"), DataError);
}

TEST(EpochOrder, PermutationDependingOnSeedAndEpoch) {
  const std::vector<long> a = epoch_order(10, 3, 0);
  std::vector<long> sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (long i = 0; i < 10; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(epoch_order(10, 3, 0), a);
  EXPECT_NE(epoch_order(10, 3, 1), a);
  EXPECT_NE(epoch_order(10, 4, 0), a);
  EXPECT_EQ(epoch_order(1, 9, 5), std::vector<long>{0});
}
