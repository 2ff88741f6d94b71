#include "rino/eval.hpp"

#include "rino/error.hpp"
#include "rino/maps.hpp"
#include "rino/rotations.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <unordered_map>

namespace rino {

double mean_geo_err(const IndexMap& pred, const IndexMap& gt, const Mesh& mesh_y, long* unreachable) {
  if (pred.size() != gt.size()) throw DataError("mean_geo_err: prediction and ground truth differ in length");
  if (pred.empty()) throw DataError("mean_geo_err: empty map");
  const int n = mesh_y.num_vertices();
  std::unordered_map<int, Eigen::VectorXd> fields;
  double sum = 0.0;
  long bad = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int a = pred[i];
    const int b = gt[i];
    if (a < 0 || a >= n || b < 0 || b >= n) throw DataError("mean_geo_err: index outside the target mesh");
    if (a == b) continue;
    auto it = fields.find(b);
    if (it == fields.end()) it = fields.emplace(b, geodesic_distances(mesh_y, b).dist).first;
    const double d = it->second[a];
    if (!std::isfinite(d)) {
      ++bad;
      continue;
    }
    sum += d;
  }
  if (unreachable) *unreachable = bad;
  if (bad > 0) return std::numeric_limits<double>::infinity();
  return sum / static_cast<double>(pred.size()) / std::sqrt(mesh_y.total_area()) * 100.0;
}

SymFlipReport count_sym_flips(const std::vector<IndexMap>& preds, const std::vector<IndexMap>& gt_direct,
                              const std::vector<IndexMap>& gt_symmetric, const std::vector<const Mesh*>& meshes_y) {
  const std::size_t n = preds.size();
  if (gt_direct.size() != n || meshes_y.size() != n) throw DataError("count_sym_flips: argument lengths differ");
  if (gt_symmetric.size() != n) throw DataError("count_sym_flips: a symmetric ground truth is required for every pair");
  SymFlipReport r;
  for (std::size_t i = 0; i < n; ++i) {
    if (gt_symmetric[i].empty()) throw DataError("count_sym_flips: missing symmetric map for pair " + std::to_string(i));
    const double e = mean_geo_err(preds[i], gt_direct[i], *meshes_y[i]);
    const double es = mean_geo_err(preds[i], gt_symmetric[i], *meshes_y[i]);
    const bool flip = es < e;
    r.direct.push_back(e);
    r.symmetric.push_back(es);
    r.flipped.push_back(flip);
    r.flips += flip ? 1 : 0;
    r.err_e += e;
    r.err_es += std::min(e, es);
  }
  if (n > 0) {
    r.err_e /= static_cast<double>(n);
    r.err_es /= static_cast<double>(n);
  }
  return r;
}

ShapeData prepare_shape(const Mesh& mesh, const PipelineConfig& config, int knn) {
  return make_shape_data(mesh, build_shape_bundle(mesh, config.k, config.k_q), knn);
}

IndexMap predict_map_from_features(Eigen::MatrixXd f_x, Eigen::MatrixXd f_y) {
  for (long i = 0; i < f_x.rows(); ++i) f_x.row(i) /= std::max(f_x.row(i).norm(), 1e-300);
  for (long i = 0; i < f_y.rows(); ++i) f_y.row(i) /= std::max(f_y.row(i).norm(), 1e-300);
  return hard_map_nn(f_x, f_y);
}

IndexMap predict_map(const NetworkParams& params, const ShapeData& x, const ShapeData& y) {
  return predict_map_from_features(compute_features(params, x), compute_features(params, y));
}

double invariance_report(const NetworkParams& params, const Mesh& x, const Mesh& y, int rotations,
                         std::uint64_t seed, const PipelineConfig& config) {
  if (rotations < 1) throw UsageError("invariance_report: need at least one rotation");
  const int knn = params.config.knn;
  const IndexMap base = predict_map(params, prepare_shape(x, config, knn), prepare_shape(y, config, knn));
  std::mt19937_64 rng(seed);
  long same = 0;
  long total = 0;
  for (int r = 0; r < rotations; ++r) {
    const Mesh xr = transformed(x, random_rotation(rng), Eigen::Vector3d::Zero());
    const Mesh yr = transformed(y, random_rotation(rng), Eigen::Vector3d::Zero());
    const IndexMap m = predict_map(params, prepare_shape(xr, config, knn), prepare_shape(yr, config, knn));
    for (std::size_t i = 0; i < base.size(); ++i) same += m[i] == base[i] ? 1 : 0;
    total += static_cast<long>(base.size());
  }
  return static_cast<double>(same) / static_cast<double>(total);
}

std::vector<NoisePoint> noise_sweep(const NetworkParams& params, const Mesh& x, const Mesh& y, const IndexMap& gt,
                                    const std::vector<double>& sigmas, const std::vector<std::uint64_t>& seeds,
                                    const PipelineConfig& config) {
  std::vector<NoisePoint> out;
  const int knn = params.config.knn;
  for (const double sigma : sigmas) {
    if (!(sigma >= 0.0)) throw UsageError("noise_sweep: sigma must be nonnegative");
    for (const std::uint64_t seed : seeds) {
      const Mesh xn = sigma > 0.0 ? perturb_gaussian(x, sigma, 2 * seed) : x;
      const Mesh yn = sigma > 0.0 ? perturb_gaussian(y, sigma, 2 * seed + 1) : y;
      const IndexMap pred = predict_map(params, prepare_shape(xn, config, knn), prepare_shape(yn, config, knn));
      out.push_back({sigma, seed, mean_geo_err(pred, gt, yn)});
    }
  }
  return out;
}

std::string noise_sweep_csv(const std::vector<NoisePoint>& points) {
  std::ostringstream os;
  os << "sigma,seed,mgeo_err\n" << std::setprecision(17);
  for (const auto& p : points) os << p.sigma << ',' << p.seed << ',' << p.mgeo_err << '\n';
  return os.str();
}

RigidTransform procrustes_align(const Points& p, const Points& q, const IndexMap& correspondence) {
  if (static_cast<long>(correspondence.size()) != p.rows()) {
    throw DataError("procrustes_align: one correspondence entry per source point is required");
  }
  std::vector<std::pair<long, long>> used;
  for (long i = 0; i < p.rows(); ++i) {
    const int j = correspondence[static_cast<std::size_t>(i)];
    if (j < 0) continue;
    if (j >= q.rows()) throw DataError("procrustes_align: correspondence index outside the target set");
    used.emplace_back(i, j);
  }
  if (used.size() < 3) throw DataError("procrustes_align: need at least three correspondences");
  Eigen::Vector3d cp = Eigen::Vector3d::Zero();
  Eigen::Vector3d cq = Eigen::Vector3d::Zero();
  for (const auto& [i, j] : used) {
    cp += p.row(i).transpose();
    cq += q.row(j).transpose();
  }
  cp /= static_cast<double>(used.size());
  cq /= static_cast<double>(used.size());
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d spread = Eigen::Matrix3d::Zero();
  for (const auto& [i, j] : used) {
    const Eigen::Vector3d a = p.row(i).transpose() - cp;
    h += (q.row(j).transpose() - cq) * a.transpose();
    spread += a * a.transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> sp(spread);
  const Eigen::Vector3d sv = sp.singularValues();
  if (!(sv[1] > 1e-12 * std::max(sv[0], 1e-300))) {
    throw DataError("procrustes_align: source points are collinear; the rotation is not determined");
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  RigidTransform out;
  out.rotation = svd.matrixU() * d * svd.matrixV().transpose();
  out.translation = cq - out.rotation * cp;
  return out;
}

std::string setting_name(RotationSetting s) {
  switch (s) {
    case RotationSetting::kAlignedAligned:
      return "I/I";
    case RotationSetting::kAlignedSO3:
      return "I/SO(3)";
    case RotationSetting::kSO3SO3:
      return "SO(3)/SO(3)";
    case RotationSetting::kYY:
      return "Y/Y";
  }
  return "?";
}

RotationSetting setting_from_string(const std::string& name) {
  for (const RotationSetting s : kAllSettings) {
    if (setting_name(s) == name) return s;
  }
  throw UsageError("unknown rotation setting '" + name + "' (expected I/I, I/SO(3), SO(3)/SO(3) or Y/Y)");
}

std::pair<Eigen::Matrix3d, Eigen::Matrix3d> setting_rotations(RotationSetting s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Eigen::Matrix3d id = Eigen::Matrix3d::Identity();
  switch (s) {
    case RotationSetting::kAlignedAligned:
      return {id, id};
    case RotationSetting::kAlignedSO3:
      return {id, random_rotation(rng)};
    case RotationSetting::kSO3SO3: {
      const Eigen::Matrix3d a = random_rotation(rng);
      return {a, random_rotation(rng)};
    }
    case RotationSetting::kYY: {
      const Eigen::Matrix3d a = random_y_rotation(rng);
      return {a, random_y_rotation(rng)};
    }
  }
  return {id, id};
}

double EvalReport::mean(const std::string& setting) const {
  double sum = 0.0;
  long count = 0;
  for (const auto& r : rows) {
    if (r.setting != setting) continue;
    sum += r.mgeo_err;
    ++count;
  }
  return count ? sum / static_cast<double>(count) : std::numeric_limits<double>::quiet_NaN();
}

long EvalReport::flip_count() const {
  long n = 0;
  for (const auto& r : rows) n += r.flipped ? 1 : 0;
  return n;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "pair_id,setting,mgeo_err,flipped\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.pair_id << ',' << r.setting << ',' << r.mgeo_err << ',' << (r.flipped ? 1 : 0) << '\n';
  return os.str();
}

std::string EvalReport::summary(const std::string& method) const {
  std::vector<std::string> settings;
  for (const auto& r : rows) {
    if (std::find(settings.begin(), settings.end(), r.setting) == settings.end()) settings.push_back(r.setting);
  }
  std::ostringstream os;
  os << std::left << std::setw(12) << "method";
  for (const auto& s : settings) os << std::right << std::setw(14) << s;
  os << std::right << std::setw(8) << "flips" << '\n';
  os << std::left << std::setw(12) << method << std::fixed << std::setprecision(2);
  for (const auto& s : settings) os << std::right << std::setw(14) << mean(s);
  os << std::right << std::setw(8) << flip_count() << '\n';
  return os.str();
}

}  // namespace rino
