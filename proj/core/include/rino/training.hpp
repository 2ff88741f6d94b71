#pragma once

#include "rino/autodiff.hpp"
#include "rino/rinonet.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace rino {

struct LossWeights {
  double orth_c = 1.0;    ///< lambda_1
  double orth_q = 0.1;    ///< lambda_2
  double bij = 1.0;       ///< lambda_3
  double couple_c = 1.0;  ///< lambda_4
  double couple_q = 0.1;  ///< lambda_5, also weights the optional C-Q coupling
  double contr = 1.0;     ///< lambda_6
};

/// Ablation switches. Disabling a group drops exactly its terms.
struct LossToggles {
  bool structural = true;
  bool coupling = true;
  bool contrastive = true;
  bool q_branch = true;     ///< off: no Q is computed, orth(Q) and Pi-Q terms vanish
  bool pi_q = true;         ///< off: Pi-Q coupling only
  bool cq_coupling = false; ///< on: adds ||Q - c_to_q(C)||^2 both ways
};

struct ObjectiveConfig {
  double tau = 0.07;
  double gamma = 1e-3;    ///< ridge weight of the scalar map solve
  double gamma_q = 1e-3;  ///< ridge weight of the complex map solve
  LossWeights weights;
  LossToggles toggles;
};

/// Differentiable pieces of the objective for one pair.
struct PairObjective {
  ad::Tensor c_xy, c_yx;
  ad::Tensor q_xy, q_yx;  ///< invalid when the Q branch is off
  /// Weighted terms in a fixed order; only enabled terms are present.
  std::vector<std::pair<std::string, ad::Tensor>> terms;
  ad::Tensor total;
};

/// ||A^H A - I||^2
ad::Tensor loss_orth(ad::Tensor a);
/// ||A B - I||^2
ad::Tensor loss_bij(ad::Tensor a, ad::Tensor b);

/// Builds the full objective from raw network features F_X, F_Y. Map solves
/// use the raw features; soft maps use unit-normalized rows.
PairObjective build_objective(ad::Tensor f_x, ad::Tensor f_y, const ShapeData& x, const ShapeData& y,
                              const ObjectiveConfig& config);

struct TrainConfig {
  NetworkConfig network;
  ObjectiveConfig objective;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global L2 norm the gradient is rescaled to before the Adam moments are
  /// updated; 0 disables clipping.
  double grad_clip = 1.0;
  long iterations = 1000;
  std::uint64_t seed = 0;
  long checkpoint_every = 100;  ///< 0 disables periodic checkpoints
  std::filesystem::path checkpoint;  ///< empty: no checkpoints written
  std::filesystem::path loss_log;    ///< CSV (step, term, value); empty: none
};

struct AdamState {
  std::map<std::string, Eigen::MatrixXd> m;
  std::map<std::string, Eigen::MatrixXd> v;
};

struct TrainState {
  NetworkParams params;
  AdamState adam;
  long step = 0;  ///< completed optimizer steps
};

TrainState init_train_state(const TrainConfig& config);

/// Parameters, Adam moments and the step counter in one archive.
void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

struct StepReport {
  long step = 0;
  long pair = 0;
  double total = 0.0;
  double grad_norm = 0.0;  ///< before clipping; 0 when no update was made
  std::vector<std::pair<std::string, double>> terms;
};

/// Loss value and terms at fixed parameters; no update.
StepReport evaluate_objective(const NetworkParams& params, const ShapeData& x, const ShapeData& y,
                              const ObjectiveConfig& config);

/// One Adam update on one pair. Throws NumericalError on a non-finite loss.
StepReport train_step(TrainState& state, const ShapeData& x, const ShapeData& y, const TrainConfig& config);

/// Visiting order of the pairs during one epoch, a function of (seed, epoch)
/// only, so a resumed run replays the same sequence.
std::vector<long> epoch_order(long num_pairs, std::uint64_t seed, long epoch);

using StepObserver = std::function<void(const StepReport&)>;

/// Runs steps state.step .. config.iterations - 1. Writes checkpoints and the
/// loss log when configured. On a non-finite loss throws NumericalError naming
/// the last good checkpoint.
void train_loop(TrainState& state, const std::vector<ShapeData>& shapes,
                const std::vector<std::pair<int, int>>& pairs, const TrainConfig& config,
                const StepObserver& observer = {});

}  // namespace rino
