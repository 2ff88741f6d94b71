#pragma once

#include "rino/mesh.hpp"
#include "rino/rinonet.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <vector>

namespace rino {

/// Mean over X of geodesic_Y(pred(x), gt(x)) / sqrt(area(Y)) * 100.
/// Unreachable targets make the result +infinity; their count goes to
/// `unreachable` when given.
double mean_geo_err(const IndexMap& pred, const IndexMap& gt, const Mesh& mesh_y, long* unreachable = nullptr);

struct SymFlipReport {
  double err_e = 0.0;   ///< mean error against the direct ground truth
  double err_es = 0.0;  ///< mean of the per-pair minimum over {direct, symmetric}
  long flips = 0;
  std::vector<double> direct;     ///< per-pair error, direct GT
  std::vector<double> symmetric;  ///< per-pair error, symmetric GT
  std::vector<bool> flipped;
};

/// A pair is flipped when its error against the symmetric ground truth is
/// strictly below its error against the direct one.
SymFlipReport count_sym_flips(const std::vector<IndexMap>& preds, const std::vector<IndexMap>& gt_direct,
                              const std::vector<IndexMap>& gt_symmetric, const std::vector<const Mesh*>& meshes_y);

/// Spectral sizes used when a mesh is turned into network input.
struct PipelineConfig {
  int k = 200;
  int k_q = 30;
};

ShapeData prepare_shape(const Mesh& mesh, const PipelineConfig& config, int knn);

/// Hard map X -> Y by nearest neighbors of unit-normalized features.
IndexMap predict_map(const NetworkParams& params, const ShapeData& x, const ShapeData& y);
IndexMap predict_map_from_features(Eigen::MatrixXd f_x, Eigen::MatrixXd f_y);

/// Fraction of X vertices whose match is unchanged, over `rotations` runs in
/// which both meshes receive independent uniform random rotations.
double invariance_report(const NetworkParams& params, const Mesh& x, const Mesh& y, int rotations,
                         std::uint64_t seed, const PipelineConfig& config);

struct NoisePoint {
  double sigma = 0.0;
  std::uint64_t seed = 0;
  double mgeo_err = 0.0;
};

/// Perturbs both meshes with N(0, sigma^2) coordinate noise (sigma in the
/// meshes' length units), rebuilds operators, matches and evaluates.
std::vector<NoisePoint> noise_sweep(const NetworkParams& params, const Mesh& x, const Mesh& y, const IndexMap& gt,
                                    const std::vector<double>& sigmas, const std::vector<std::uint64_t>& seeds,
                                    const PipelineConfig& config);
std::string noise_sweep_csv(const std::vector<NoisePoint>& points);

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
};

/// Least-squares R in SO(3), t with q_corr[i] ~ R p_i + t. Entries of
/// `correspondence` below zero are skipped. Throws DataError when fewer than
/// three non-collinear pairs remain.
RigidTransform procrustes_align(const Points& p, const Points& q, const IndexMap& correspondence);

enum class RotationSetting { kAlignedAligned, kAlignedSO3, kSO3SO3, kYY };

inline constexpr RotationSetting kAllSettings[] = {RotationSetting::kAlignedAligned, RotationSetting::kAlignedSO3,
                                                   RotationSetting::kSO3SO3, RotationSetting::kYY};

/// "I/I", "I/SO(3)", "SO(3)/SO(3)", "Y/Y".
std::string setting_name(RotationSetting setting);
RotationSetting setting_from_string(const std::string& name);

/// Rotations applied to (X, Y) under a setting; deterministic in `seed`.
std::pair<Eigen::Matrix3d, Eigen::Matrix3d> setting_rotations(RotationSetting setting, std::uint64_t seed);

struct EvalRow {
  std::string pair_id;
  std::string setting;
  double mgeo_err = 0.0;
  bool flipped = false;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  /// Mean error of the rows with this setting (NaN when there are none).
  double mean(const std::string& setting) const;
  long flip_count() const;
  /// Columns: pair_id,setting,mgeo_err,flipped
  std::string to_csv() const;
  /// One line per method, one column per setting present.
  std::string summary(const std::string& method = "RINO") const;
};

}  // namespace rino
