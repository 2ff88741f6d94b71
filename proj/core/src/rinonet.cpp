#include "rino/rinonet.hpp"

#include "rino/error.hpp"
#include "rino/synthetic.hpp"

#include <cmath>
#include <random>

namespace rino {
namespace {

using ad::Tensor;

std::string block_name(int b, const char* leaf) { return "block" + std::to_string(b) + "." + leaf; }

struct ParamShape {
  std::string name;
  long rows;
  long cols;
};

std::vector<ParamShape> param_shapes(const NetworkConfig& cfg) {
  const long c = cfg.channels, h = cfg.mlp_hidden, d = cfg.out_dim;
  std::vector<ParamShape> out = {{"edge.w", c, 2}, {"edge.k", c, c}, {"lift.w", c, c}};
  for (int b = 0; b < cfg.blocks; ++b) {
    out.push_back({block_name(b, "theta"), 1, c});
    out.push_back({block_name(b, "a_re"), c, c});
    out.push_back({block_name(b, "a_im"), c, c});
    out.push_back({block_name(b, "mlp1.w"), h, 3 * c});
    out.push_back({block_name(b, "mlp1.k"), h, h});
    out.push_back({block_name(b, "mlp2.w"), c, h});
    out.push_back({block_name(b, "mlp2.k"), c, c});
  }
  out.push_back({"inv.w", c, c});
  out.push_back({"inv.k", c, c});
  out.push_back({"inv.t", 3, c});
  out.push_back({"head.w", d, 3 * c});
  return out;
}

void validate_config(const NetworkConfig& cfg) {
  if (cfg.channels < 1 || cfg.blocks < 0 || cfg.out_dim < 1 || cfg.mlp_hidden < 1 || cfg.knn < 1) {
    throw UsageError("network configuration values must be positive");
  }
}

double reference_log_time() {
  const Mesh ref = normalize_unit_area(icosphere(3));
  double acc = 0.0;
  const auto edges = unique_edges(ref);
  for (const auto& e : edges) acc += (ref.vertices().row(e[0]) - ref.vertices().row(e[1])).squaredNorm();
  return std::log(acc / static_cast<double>(edges.size()));
}

const Tensor& param(const ParamVars& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) throw UsageError("missing network parameter '" + name + "'");
  return it->second;
}

}  // namespace

long NetworkParams::count() const {
  long n = 0;
  for (const auto& [name, m] : tensors) n += m.size();
  return n;
}

bool NetworkParams::operator==(const NetworkParams& o) const {
  if (seed != o.seed || config.channels != o.config.channels || config.blocks != o.config.blocks ||
      config.out_dim != o.config.out_dim || config.mlp_hidden != o.config.mlp_hidden || config.knn != o.config.knn ||
      tensors.size() != o.tensors.size()) {
    return false;
  }
  for (const auto& [name, m] : tensors) {
    auto it = o.tensors.find(name);
    if (it == o.tensors.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols() ||
        it->second != m) {
      return false;
    }
  }
  return true;
}

long count_params(const NetworkConfig& config) {
  long n = 0;
  for (const auto& s : param_shapes(config)) n += s.rows * s.cols;
  return n;
}

NetworkParams init_params(std::uint64_t seed, const NetworkConfig& config) {
  validate_config(config);
  NetworkParams p;
  p.config = config;
  p.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss;
  const double log_t0 = reference_log_time();
  for (const auto& s : param_shapes(config)) {
    Eigen::MatrixXd m(s.rows, s.cols);
    const bool is_theta = s.name.size() > 5 && s.name.compare(s.name.size() - 5, 5, "theta") == 0;
    const bool is_a_re = s.name.find("a_re") != std::string::npos;
    const bool is_a_im = s.name.find("a_im") != std::string::npos;
    if (is_theta) {
      for (long j = 0; j < m.size(); ++j) m(j) = log_t0 + 0.5 * unit(rng);
    } else if (is_a_re || is_a_im) {
      for (long j = 0; j < m.size(); ++j) m(j) = 0.01 * gauss(rng);
      if (is_a_re) m.diagonal().array() += 1.0;
    } else {
      // Gain 1.2 over the 1/sqrt(fan_in) bound: with gain 1 the output rows
      // have norm ~0.02 and the regularizer dominates the map solves.
      const double bound = 1.2 / std::sqrt(static_cast<double>(s.cols));
      for (long j = 0; j < m.size(); ++j) m(j) = bound * unit(rng);
    }
    p.tensors.emplace(s.name, std::move(m));
  }
  return p;
}

ArrayArchive params_to_archive(const NetworkParams& params) {
  ArrayArchive a;
  a.version = kParamsVersion;
  a.put_scalar("meta.channels", params.config.channels);
  a.put_scalar("meta.blocks", params.config.blocks);
  a.put_scalar("meta.out_dim", params.config.out_dim);
  a.put_scalar("meta.mlp_hidden", params.config.mlp_hidden);
  a.put_scalar("meta.knn", params.config.knn);
  a.put_scalar("meta.seed_hi", static_cast<double>(params.seed >> 32));
  a.put_scalar("meta.seed_lo", static_cast<double>(params.seed & 0xffffffffULL));
  for (const auto& [name, m] : params.tensors) a.put_matrix("param." + name, m);
  return a;
}

NetworkParams params_from_archive(const ArrayArchive& a) {
  if (a.version != kParamsVersion) {
    throw DataError("parameter file version " + std::to_string(a.version) + " is not supported (expected " +
                    std::to_string(kParamsVersion) + ")");
  }
  NetworkParams p;
  p.config.channels = static_cast<int>(a.get_scalar("meta.channels"));
  p.config.blocks = static_cast<int>(a.get_scalar("meta.blocks"));
  p.config.out_dim = static_cast<int>(a.get_scalar("meta.out_dim"));
  p.config.mlp_hidden = static_cast<int>(a.get_scalar("meta.mlp_hidden"));
  p.config.knn = static_cast<int>(a.get_scalar("meta.knn"));
  validate_config(p.config);
  p.seed = (static_cast<std::uint64_t>(a.get_scalar("meta.seed_hi")) << 32) |
           static_cast<std::uint64_t>(a.get_scalar("meta.seed_lo"));
  for (const auto& s : param_shapes(p.config)) {
    Eigen::MatrixXd m = a.get_matrix("param." + s.name);
    if (m.rows() != s.rows || m.cols() != s.cols) throw DataError("parameter '" + s.name + "' has the wrong shape");
    p.tensors.emplace(s.name, std::move(m));
  }
  return p;
}

void save_params(const NetworkParams& params, const std::filesystem::path& path) {
  params_to_archive(params).save(path);
}

NetworkParams load_params(const std::filesystem::path& path) { return params_from_archive(ArrayArchive::load(path)); }

ShapeData make_shape_data(Mesh mesh, ShapeBundle bundle, int knn) {
  const int n = mesh.num_vertices();
  if (knn < 1) throw UsageError("knn must be positive");
  const int k = std::min(knn, n - 1);
  if (k < 1) throw DataError("EdgeConv needs at least two vertices");
  ShapeData s;
  s.neighbors = knn_graph(mesh.vertices(), k);
  const Eigen::Vector3d centroid = mesh.area_weighted_centroid();
  const long edges = static_cast<long>(n) * k;
  s.edge_input.resize(edges, 6);
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<std::size_t>(edges));
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d xi = mesh.vertices().row(i).transpose();
    for (int r = 0; r < k; ++r) {
      const long e = static_cast<long>(i) * k + r;
      const Eigen::Vector3d xj = mesh.vertices().row(s.neighbors[i][r]).transpose();
      for (int d = 0; d < 3; ++d) {
        s.edge_input(e, 2 * d) = xj[d] - xi[d];
        s.edge_input(e, 2 * d + 1) = xi[d] - centroid[d];
      }
      trips.emplace_back(i, e, 1.0 / k);
    }
  }
  s.edge_mean.resize(n, edges);
  s.edge_mean.setFromTriplets(trips.begin(), trips.end());
  s.mesh = std::move(mesh);
  s.bundle = std::move(bundle);
  return s;
}

ParamVars attach_params(ad::Tape& tape, const NetworkParams& params, bool trainable) {
  ParamVars out;
  for (const auto& [name, m] : params.tensors) out.emplace(name, trainable ? tape.variable(m) : tape.constant(m));
  return out;
}

Tensor vn_relu(Tensor u, Tensor k_weights) { return ad::vn_relu_dir(u, ad::vn_linear(u, k_weights)); }

Tensor vn_concat(const std::vector<Tensor>& parts) {
  std::vector<Tensor> cols;
  for (int d = 0; d < 3; ++d) {
    for (const auto& p : parts) {
      if (p.cols() % 3 != 0) throw UsageError("vn_concat: VN feature width must be a multiple of 3");
      const long c = p.cols() / 3;
      cols.push_back(ad::slice_cols(p, d * c, c));
    }
  }
  return ad::concat_cols(cols);
}

Tensor vn_edgeconv(const ParamVars& p, const ShapeData& shape) {
  const Tensor& w = param(p, "edge.w");
  ad::Tape& tape = *w.tape();
  const Tensor input = tape.constant(shape.edge_input);
  Tensor y = ad::vn_linear(input, w);
  y = vn_relu(y, param(p, "edge.k"));
  return ad::sparse_matmul(shape.edge_mean, y);
}

Tensor vn_diffusion(const SpectralBasis& basis, Tensor u, Tensor theta) {
  return ad::diffusion(basis, u, ad::exp(theta));
}

Tensor vn_gradient_aggregate(Tensor w, Tensor a, const ForwardOptions& options) {
  Tensor prod = ad::real_part(ad::mul(ad::conj(w), ad::vn_linear(w, a)));
  if (options.mutate_gradient_sign) {
    const long c = prod.cols() / 3;
    prod = ad::concat_cols({ad::slice_cols(prod, 0, 2 * c), ad::scale(ad::slice_cols(prod, 2 * c, c), -1.0)});
  }
  return ad::vn_sum(prod);
}

GradientLayerOut vn_gradient(const ShapeData& shape, Tensor h, Tensor a_re, Tensor a_im,
                             const ForwardOptions& options) {
  const Tensor w = ad::make_complex(ad::sparse_matmul(shape.bundle.ops.grad_re, h),
                                    ad::sparse_matmul(shape.bundle.ops.grad_im, h));
  GradientLayerOut out;
  out.f = vn_gradient_aggregate(w, ad::make_complex(a_re, a_im), options);
  out.g = ad::tanh(out.f);
  out.e = ad::mul(ad::vn_broadcast(out.g), ad::vn_normalize(h));
  return out;
}

Tensor rino_block(const ParamVars& p, int b, const ShapeData& shape, Tensor u, const ForwardOptions& options) {
  const Tensor h = vn_diffusion(shape.bundle.basis, u, param(p, block_name(b, "theta")));
  const GradientLayerOut grad = vn_gradient(shape, h, param(p, block_name(b, "a_re")), param(p, block_name(b, "a_im")),
                                            options);
  Tensor z = ad::vn_linear(vn_concat({u, h, grad.e}), param(p, block_name(b, "mlp1.w")));
  z = vn_relu(z, param(p, block_name(b, "mlp1.k")));
  z = ad::vn_linear(z, param(p, block_name(b, "mlp2.w")));
  z = vn_relu(z, param(p, block_name(b, "mlp2.k")));
  return ad::add(z, u);
}

Tensor vn_invariant(const ParamVars& p, Tensor u) {
  const long c = u.cols() / 3;
  Tensor z = vn_relu(ad::vn_linear(u, param(p, "inv.w")), param(p, "inv.k"));
  const Tensor frame = ad::vn_linear(z, param(p, "inv.t"));  // n x 9, column d * 3 + j
  ad::Tape& tape = *u.tape();
  const Tensor ones = tape.constant(Eigen::MatrixXd(Eigen::MatrixXd::Ones(1, c)));
  std::vector<Tensor> outs;
  for (long j = 0; j < 3; ++j) {
    Tensor acc;
    for (long d = 0; d < 3; ++d) {
      const Tensor t_dj = ad::matmul(ad::slice_cols(frame, d * 3 + j, 1), ones);
      const Tensor term = ad::mul(ad::slice_cols(u, d * c, c), t_dj);
      acc = acc.valid() ? ad::add(acc, term) : term;
    }
    outs.push_back(acc);
  }
  return ad::concat_cols(outs);
}

Tensor rinonet_forward(const ParamVars& p, const NetworkConfig& config, const ShapeData& shape,
                       const ForwardOptions& options) {
  Tensor u = vn_edgeconv(p, shape);
  u = ad::vn_linear(u, param(p, "lift.w"));
  for (int b = 0; b < config.blocks; ++b) u = rino_block(p, b, shape, u, options);
  const Tensor inv = vn_invariant(p, u);
  return ad::matmul(inv, param(p, "head.w"), ad::Trans::kN, ad::Trans::kT);
}

namespace {

template <typename Mat>
Mat rotate_vn_impl(const Mat& u, const Eigen::Matrix3d& r) {
  if (u.cols() % 3 != 0) throw UsageError("rotate_vn: VN feature width must be a multiple of 3");
  const long c = u.cols() / 3;
  Mat out = Mat::Zero(u.rows(), u.cols());
  for (int e = 0; e < 3; ++e) {
    for (int d = 0; d < 3; ++d) out.middleCols(e * c, c) += r(e, d) * u.middleCols(d * c, c);
  }
  return out;
}

}  // namespace

Eigen::MatrixXd rotate_vn(const Eigen::MatrixXd& u, const Eigen::Matrix3d& r) { return rotate_vn_impl(u, r); }
Eigen::MatrixXcd rotate_vn(const Eigen::MatrixXcd& u, const Eigen::Matrix3d& r) { return rotate_vn_impl(u, r); }

Eigen::MatrixXd compute_features(const NetworkParams& params, const ShapeData& shape,
                                 const ForwardOptions& options) {
  ad::Tape tape;
  const ParamVars p = attach_params(tape, params, false);
  return rinonet_forward(p, params.config, shape, options).re();
}

}  // namespace rino
