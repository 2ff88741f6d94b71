#include "rino/training.hpp"

#include "rino/error.hpp"
#include "rino/maps.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

namespace rino {

using ad::Tensor;
using ad::Trans;

namespace {

Tensor identity(ad::Tape& tape, long n) { return tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Identity(n, n))); }

// Phi_Y^+ softmax(Fy Fx^T / tau) Phi_X
Tensor soft_fmap(Tensor fy_unit, Tensor fx_unit, const ShapeData& x, const ShapeData& y, double tau) {
  const Tensor pi = ad::softmax_rows(ad::matmul(fy_unit, fx_unit, Trans::kN, Trans::kT), tau);
  return maps_ad::pi_to_c(pi, x.bundle.basis, y.bundle.basis);
}

Tensor coeffs(ad::Tape& tape, const SpectralBasis& basis, Tensor f) {
  return ad::matmul(tape.constant(basis.pinv()), f);
}

Tensor conn_coeffs(ad::Tape& tape, const ShapeData& s, Tensor f) {
  const Tensor w = ad::make_complex(ad::sparse_matmul(s.bundle.ops.grad_re, f),
                                    ad::sparse_matmul(s.bundle.ops.grad_im, f));
  return ad::matmul(tape.constant(s.bundle.conn_basis.pinv()), w);
}

}  // namespace

Tensor loss_orth(Tensor a) {
  ad::Tape& tape = *a.tape();
  return ad::sum_sq(ad::sub(ad::matmul(a, a, Trans::kH, Trans::kN), identity(tape, a.cols())));
}

Tensor loss_bij(Tensor a, Tensor b) {
  ad::Tape& tape = *a.tape();
  return ad::sum_sq(ad::sub(ad::matmul(a, b), identity(tape, a.rows())));
}

PairObjective build_objective(Tensor f_x, Tensor f_y, const ShapeData& x, const ShapeData& y,
                              const ObjectiveConfig& config) {
  ad::Tape& tape = *f_x.tape();
  const LossWeights& w = config.weights;
  const LossToggles& on = config.toggles;
  PairObjective out;

  const SpectralBasis& bx = x.bundle.basis;
  const SpectralBasis& by = y.bundle.basis;
  const Tensor a_x = coeffs(tape, bx, f_x);
  const Tensor a_y = coeffs(tape, by, f_y);
  out.c_xy = ad::ridge_solve(a_x, a_y, commutativity_mask(bx.evals, by.evals), config.gamma);
  out.c_yx = ad::ridge_solve(a_y, a_x, commutativity_mask(by.evals, bx.evals), config.gamma);

  Eigen::MatrixXcd transfer_x, transfer_y;
  if (on.q_branch) {
    const Tensor b_x = conn_coeffs(tape, x, f_x);
    const Tensor b_y = conn_coeffs(tape, y, f_y);
    const ConnectionBasis& qx = x.bundle.conn_basis;
    const ConnectionBasis& qy = y.bundle.conn_basis;
    out.q_xy = ad::ridge_solve(b_x, b_y, commutativity_mask(qx.evals, qy.evals), config.gamma_q);
    out.q_yx = ad::ridge_solve(b_y, b_x, commutativity_mask(qy.evals, qx.evals), config.gamma_q);
    transfer_x = gradient_transfer(x.bundle);
    transfer_y = gradient_transfer(y.bundle);
  }

  auto add = [&](const char* name, double weight, Tensor value) {
    out.terms.emplace_back(name, ad::scale(value, weight));
  };

  if (on.structural) {
    add("orth_c_xy", w.orth_c, loss_orth(out.c_xy));
    add("orth_c_yx", w.orth_c, loss_orth(out.c_yx));
    if (on.q_branch) {
      add("orth_q_xy", w.orth_q, loss_orth(out.q_xy));
      add("orth_q_yx", w.orth_q, loss_orth(out.q_yx));
    }
    add("bij_xy", w.bij, loss_bij(out.c_xy, out.c_yx));
    add("bij_yx", w.bij, loss_bij(out.c_yx, out.c_xy));
  }

  const bool need_soft = on.coupling || on.contrastive;
  Tensor ux, uy;
  if (need_soft) {
    ux = ad::normalize_rows(f_x);
    uy = ad::normalize_rows(f_y);
  }
  if (on.coupling) {
    const Tensor hat_xy = soft_fmap(uy, ux, x, y, config.tau);
    const Tensor hat_yx = soft_fmap(ux, uy, y, x, config.tau);
    add("pc_xy", w.couple_c, ad::sum_sq(ad::sub(out.c_xy, hat_xy)));
    add("pc_yx", w.couple_c, ad::sum_sq(ad::sub(out.c_yx, hat_yx)));
    if (on.q_branch && on.pi_q) {
      const Tensor q_hat_xy = maps_ad::c_to_q(hat_xy, transfer_x, transfer_y);
      const Tensor q_hat_yx = maps_ad::c_to_q(hat_yx, transfer_y, transfer_x);
      add("pq_xy", w.couple_q, ad::sum_sq(ad::sub(out.q_xy, q_hat_xy)));
      add("pq_yx", w.couple_q, ad::sum_sq(ad::sub(out.q_yx, q_hat_yx)));
    }
  }
  if (on.contrastive) {
    const Tensor self_x = soft_fmap(ux, ux, x, x, config.tau);
    const Tensor self_y = soft_fmap(uy, uy, y, y, config.tau);
    add("contr_x", w.contr, ad::sum_sq(ad::sub(self_x, identity(tape, self_x.rows()))));
    add("contr_y", w.contr, ad::sum_sq(ad::sub(self_y, identity(tape, self_y.rows()))));
  }
  if (on.q_branch && on.cq_coupling) {
    add("cq_xy", w.couple_q, ad::sum_sq(ad::sub(out.q_xy, maps_ad::c_to_q(out.c_xy, transfer_x, transfer_y))));
    add("cq_yx", w.couple_q, ad::sum_sq(ad::sub(out.q_yx, maps_ad::c_to_q(out.c_yx, transfer_y, transfer_x))));
  }

  if (out.terms.empty()) {
    out.total = tape.constant(Eigen::MatrixXd::Zero(1, 1).eval());
  } else {
    out.total = out.terms.front().second;
    for (std::size_t i = 1; i < out.terms.size(); ++i) out.total = ad::add(out.total, out.terms[i].second);
  }
  return out;
}

TrainState init_train_state(const TrainConfig& config) {
  TrainState s;
  s.params = init_params(config.seed, config.network);
  for (const auto& [name, m] : s.params.tensors) {
    s.adam.m.emplace(name, Eigen::MatrixXd::Zero(m.rows(), m.cols()));
    s.adam.v.emplace(name, Eigen::MatrixXd::Zero(m.rows(), m.cols()));
  }
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  ArrayArchive a = params_to_archive(state.params);
  a.put_scalar("train.step", static_cast<double>(state.step));
  for (const auto& [name, m] : state.adam.m) a.put_matrix("adam.m." + name, m);
  for (const auto& [name, v] : state.adam.v) a.put_matrix("adam.v." + name, v);
  // Write-then-rename so an interrupted save never clobbers the previous one.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  a.save(tmp);
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const ArrayArchive a = ArrayArchive::load(path);
  TrainState s;
  s.params = params_from_archive(a);
  if (!a.has("train.step")) throw DataError(path.string() + " holds parameters only, not a training checkpoint");
  s.step = static_cast<long>(a.get_scalar("train.step"));
  for (const auto& [name, m] : s.params.tensors) {
    s.adam.m.emplace(name, a.get_matrix("adam.m." + name));
    s.adam.v.emplace(name, a.get_matrix("adam.v." + name));
    if (s.adam.m[name].rows() != m.rows() || s.adam.v[name].cols() != m.cols()) {
      throw DataError("optimizer state for '" + name + "' has the wrong shape");
    }
  }
  return s;
}

namespace {

StepReport report_of(const PairObjective& obj) {
  StepReport r;
  r.total = obj.total.item();
  for (const auto& [name, t] : obj.terms) r.terms.emplace_back(name, t.item());
  return r;
}

}  // namespace

StepReport evaluate_objective(const NetworkParams& params, const ShapeData& x, const ShapeData& y,
                              const ObjectiveConfig& config) {
  ad::Tape tape;
  const ParamVars p = attach_params(tape, params, false);
  const Tensor fx = rinonet_forward(p, params.config, x);
  const Tensor fy = rinonet_forward(p, params.config, y);
  return report_of(build_objective(fx, fy, x, y, config));
}

StepReport train_step(TrainState& state, const ShapeData& x, const ShapeData& y, const TrainConfig& config) {
  ad::Tape tape;
  const ParamVars p = attach_params(tape, state.params, true);
  const Tensor fx = rinonet_forward(p, state.params.config, x);
  const Tensor fy = rinonet_forward(p, state.params.config, y);
  const PairObjective obj = build_objective(fx, fy, x, y, config.objective);
  StepReport report = report_of(obj);
  report.step = state.step;
  if (!std::isfinite(report.total)) {
    throw NumericalError("non-finite loss at step " + std::to_string(state.step));
  }
  tape.backward(obj.total);

  std::map<std::string, Eigen::MatrixXd> grads;
  double sq = 0.0;
  for (const auto& [name, value] : state.params.tensors) {
    Eigen::MatrixXd g = tape.grad(p.at(name));
    if (!g.allFinite()) throw NumericalError("non-finite gradient for '" + name + "' at step " + std::to_string(state.step));
    sq += g.squaredNorm();
    grads.emplace(name, std::move(g));
  }
  report.grad_norm = std::sqrt(sq);
  // Near rank deficiency the polar factor behind c_to_q has unbounded
  // derivatives; a single spike would otherwise inflate the second moment
  // and stall the optimizer for hundreds of steps.
  const double scale =
      config.grad_clip > 0.0 && report.grad_norm > config.grad_clip ? config.grad_clip / report.grad_norm : 1.0;

  const long t = state.step + 1;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  for (auto& [name, value] : state.params.tensors) {
    const Eigen::MatrixXd g = scale * grads.at(name);
    Eigen::MatrixXd& m = state.adam.m.at(name);
    Eigen::MatrixXd& v = state.adam.v.at(name);
    m = config.beta1 * m + (1.0 - config.beta1) * g;
    v = config.beta2 * v + (1.0 - config.beta2) * g.cwiseProduct(g);
    value.array() -= config.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config.eps);
  }
  state.step = t;
  return report;
}

std::vector<long> epoch_order(long num_pairs, std::uint64_t seed, long epoch) {
  std::vector<long> order(static_cast<std::size_t>(num_pairs));
  std::iota(order.begin(), order.end(), 0L);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle implementation.
  for (long i = num_pairs - 1; i > 0; --i) {
    const long j = static_cast<long>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  return order;
}

void train_loop(TrainState& state, const std::vector<ShapeData>& shapes, const std::vector<std::pair<int, int>>& pairs,
                const TrainConfig& config, const StepObserver& observer) {
  if (pairs.empty()) throw DataError("training needs at least one shape pair");
  for (const auto& [a, b] : pairs) {
    if (a < 0 || b < 0 || a >= static_cast<int>(shapes.size()) || b >= static_cast<int>(shapes.size())) {
      throw DataError("training pair references a missing shape");
    }
  }
  std::ofstream log;
  if (!config.loss_log.empty()) {
    const bool fresh = state.step == 0 || !std::filesystem::exists(config.loss_log);
    log.open(config.loss_log, fresh ? std::ios::trunc : std::ios::app);
    if (!log) throw DataError("cannot open loss log " + config.loss_log.string());
    if (fresh) log << "step,term,value\n";
    log.precision(17);
  }
  std::string last_good = "none";
  if (!config.checkpoint.empty() && std::filesystem::exists(config.checkpoint)) last_good = config.checkpoint.string();

  const long num_pairs = static_cast<long>(pairs.size());
  long cached_epoch = -1;
  std::vector<long> order;
  while (state.step < config.iterations) {
    const long epoch = state.step / num_pairs;
    if (epoch != cached_epoch) {
      order = epoch_order(num_pairs, config.seed, epoch);
      cached_epoch = epoch;
    }
    const long pair = order[static_cast<std::size_t>(state.step % num_pairs)];
    const auto [ix, iy] = pairs[static_cast<std::size_t>(pair)];
    StepReport report;
    try {
      report = train_step(state, shapes[static_cast<std::size_t>(ix)], shapes[static_cast<std::size_t>(iy)], config);
    } catch (const NumericalError& e) {
      throw NumericalError(std::string(e.what()) + "; last good checkpoint: " + last_good);
    }
    report.pair = pair;
    if (log.is_open()) {
      log << report.step << ",total," << report.total << '\n';
      for (const auto& [name, value] : report.terms) log << report.step << ',' << name << ',' << value << '\n';
      log.flush();
    }
    if (observer) observer(report);
    const bool periodic = config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0;
    if (!config.checkpoint.empty() && (periodic || state.step == config.iterations)) {
      save_checkpoint(state, config.checkpoint);
      last_good = config.checkpoint.string() + " (step " + std::to_string(state.step) + ")";
    }
  }
}

}  // namespace rino
