#pragma once

#include "rino/autodiff.hpp"
#include "rino/mesh.hpp"
#include "rino/operators.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rino {

struct NetworkConfig {
  int channels = 42;    ///< c
  int blocks = 4;
  int out_dim = 256;    ///< D
  int mlp_hidden = 188; ///< hidden width of the VN-MLP inside each block
  int knn = 16;         ///< EdgeConv neighbors
};

inline constexpr std::uint32_t kParamsVersion = 1;

/// Learnable tensors by name, plus the configuration they were built for.
/// Names: edge.w (c x 2), edge.k (c x c), lift.w (c x c), block<i>.theta
/// (1 x c, t = exp(theta)), block<i>.a_re / a_im (c x c), block<i>.mlp1.w
/// (h x 3c), block<i>.mlp1.k (h x h), block<i>.mlp2.w (c x h), block<i>.mlp2.k
/// (c x c), inv.w (c x c), inv.k (c x c), inv.t (3 x c), head.w (D x 3c).
struct NetworkParams {
  NetworkConfig config;
  std::uint64_t seed = 0;
  std::map<std::string, Eigen::MatrixXd> tensors;

  long count() const;
  bool operator==(const NetworkParams& other) const;
};

/// Deterministic initialization: weights uniform in +-1.2/sqrt(fan_in); log
/// diffusion times around the log mean squared edge length of a unit-area
/// icosphere with 642 vertices; A = I + 0.01 complex Gaussian noise.
NetworkParams init_params(std::uint64_t seed, const NetworkConfig& config = {});
long count_params(const NetworkConfig& config);

ArrayArchive params_to_archive(const NetworkParams& params);
NetworkParams params_from_archive(const ArrayArchive& archive);
void save_params(const NetworkParams& params, const std::filesystem::path& path);
/// Throws DataError on a version mismatch, ChecksumError on corruption.
NetworkParams load_params(const std::filesystem::path& path);

/// Per-shape inputs of the network: operators and the EdgeConv graph.
struct ShapeData {
  Mesh mesh;
  ShapeBundle bundle;
  std::vector<std::vector<int>> neighbors;
  /// Constant EdgeConv input, (n * knn) x 6 VN feature with two channels
  /// [x_j - x_i, x_i - centroid].
  Eigen::MatrixXd edge_input;
  /// Mean aggregation over each vertex's neighbors, n x (n * knn).
  SparseMatrix edge_mean;
};

ShapeData make_shape_data(Mesh mesh, ShapeBundle bundle, int knn);

/// Tape handles of every parameter tensor.
using ParamVars = std::map<std::string, ad::Tensor>;
ParamVars attach_params(ad::Tape& tape, const NetworkParams& params, bool trainable);

struct ForwardOptions {
  /// Test fixture: flips the sign of the last VN component inside the gradient-layer
  /// sum, which breaks rotation invariance.
  bool mutate_gradient_sign = false;
};

// Layers. VN features are n x 3c tensors (column d * c + channel).
ad::Tensor vn_relu(ad::Tensor u, ad::Tensor k_weights);
/// Concatenates VN features along the channel axis.
ad::Tensor vn_concat(const std::vector<ad::Tensor>& parts);
ad::Tensor vn_edgeconv(const ParamVars& p, const ShapeData& shape);
ad::Tensor vn_diffusion(const SpectralBasis& basis, ad::Tensor u, ad::Tensor theta);

/// f = sum over the VN axis of Re(conj(w) . (w A)) for complex VN features w
/// (n x 3c) and complex A (c x c). Invariant under real rotations of w.
ad::Tensor vn_gradient_aggregate(ad::Tensor w, ad::Tensor a, const ForwardOptions& options = {});

struct GradientLayerOut {
  ad::Tensor f;  ///< n x c, conj(w) . Aw summed over the VN axis
  ad::Tensor g;  ///< tanh(f)
  ad::Tensor e;  ///< n x 3c, g times the normalized h
};
GradientLayerOut vn_gradient(const ShapeData& shape, ad::Tensor h, ad::Tensor a_re, ad::Tensor a_im,
                             const ForwardOptions& options = {});

ad::Tensor rino_block(const ParamVars& p, int block, const ShapeData& shape, ad::Tensor u,
                      const ForwardOptions& options = {});
/// Learned-frame invariant layer: n x 3c equivariant -> n x 3c invariant.
ad::Tensor vn_invariant(const ParamVars& p, ad::Tensor u);

/// Full network: n x D invariant features.
ad::Tensor rinonet_forward(const ParamVars& p, const NetworkConfig& config, const ShapeData& shape,
                           const ForwardOptions& options = {});

/// Applies x -> R x to every VN vector of an n x 3c feature (the same
/// convention as transformed() on mesh vertices).
Eigen::MatrixXd rotate_vn(const Eigen::MatrixXd& u, const Eigen::Matrix3d& rotation);
Eigen::MatrixXcd rotate_vn(const Eigen::MatrixXcd& u, const Eigen::Matrix3d& rotation);

/// Forward pass without gradient bookkeeping beyond a throwaway tape.
Eigen::MatrixXd compute_features(const NetworkParams& params, const ShapeData& shape,
                                 const ForwardOptions& options = {});

}  // namespace rino
