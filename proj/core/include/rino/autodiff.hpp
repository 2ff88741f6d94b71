#pragma once

#include "rino/eigensolver.hpp"

#include <Eigen/Core>

#include <complex>
#include <deque>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace rino {
struct SpectralBasis;
}

namespace rino::ad {

class Tape;

/// Handle to a value recorded on a tape. Values are 2-D; complex values keep
/// separate real and imaginary planes. Cheap to copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr && id_ >= 0; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

  long rows() const;
  long cols() const;
  bool is_complex() const;
  bool requires_grad() const;
  /// {rows, cols} for real tensors, {rows, cols, 2} for complex ones.
  std::vector<long> shape() const;

  const Eigen::MatrixXd& re() const;
  /// Empty for real tensors.
  const Eigen::MatrixXd& im() const;
  Eigen::MatrixXcd complex_value() const;
  /// Value of a 1 x 1 real tensor.
  double item() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Append-only record of operations. Backward visits nodes in strict reverse
/// insertion order. Constant operands captured by pointer (sparse operators,
/// spectral bases) must outlive the tape. Not thread-safe.
class Tape {
 public:
  struct Node {
    Eigen::MatrixXd re;
    Eigen::MatrixXd im;  // empty when real
    bool complex = false;
    bool requires_grad = false;
    std::vector<int> parents;
    Eigen::MatrixXd grad_re;
    Eigen::MatrixXd grad_im;
    bool has_grad = false;
    std::function<void(Tape&, const Node&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor constant(Eigen::MatrixXd value);
  Tensor constant(Eigen::MatrixXd re, Eigen::MatrixXd im);
  Tensor constant(const Eigen::MatrixXcd& value);
  /// Evaluates an Eigen expression, real or complex.
  template <typename Derived>
  Tensor constant(const Eigen::MatrixBase<Derived>& value) {
    if constexpr (Eigen::NumTraits<typename Derived::Scalar>::IsComplex) {
      return constant(Eigen::MatrixXcd(value));
    } else {
      return constant(Eigen::MatrixXd(value));
    }
  }
  Tensor variable(Eigen::MatrixXd value);
  Tensor variable(Eigen::MatrixXd re, Eigen::MatrixXd im);

  /// Reverse sweep from a real 1 x 1 tensor. Leaf gradients accumulate
  /// across sweeps until zero_grad().
  void backward(Tensor root);
  void zero_grad();

  /// Gradient dL/d(re) (+ i dL/d(im) for complex leaves); zero if the node
  /// was not reached.
  Eigen::MatrixXd grad(Tensor t) const;
  Eigen::MatrixXd grad_im(Tensor t) const;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const;

  // Used by op implementations.
  Tensor record(Node node);
  void accumulate(int id, const Eigen::MatrixXd& g_re, const Eigen::MatrixXd* g_im = nullptr);
  void check_owner(const Tensor& t) const;

 private:
  std::deque<Node> nodes_;  // deque: references to values stay valid while recording
};

enum class Trans { kN, kT, kH };

// Elementwise and linear algebra. Real and complex operands may be mixed
// where noted; a real operand is treated as having zero imaginary part.
Tensor add(Tensor a, Tensor b);         // same shape, mixed ok
Tensor sub(Tensor a, Tensor b);         // same shape, mixed ok
Tensor scale(Tensor a, double s);
Tensor mul(Tensor a, Tensor b);         // elementwise, mixed ok
Tensor matmul(Tensor a, Tensor b, Trans ta = Trans::kN, Trans tb = Trans::kN);  // mixed ok
Tensor conj(Tensor a);
Tensor real_part(Tensor a);
Tensor imag_part(Tensor a);
Tensor make_complex(Tensor re, Tensor im);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(Tensor a, long start, long count);
/// axis 0 sums over rows (-> 1 x cols); axis 1 sums over columns (-> rows x 1).
Tensor sum(Tensor a, int axis);
Tensor sum_all(Tensor a);
/// Sum of squared magnitudes, a real 1 x 1 tensor.
Tensor sum_sq(Tensor a);

Tensor tanh(Tensor a);
Tensor exp(Tensor a);
Tensor reciprocal(Tensor a);
/// Row-wise softmax of a / temperature, stabilized by row-max subtraction.
Tensor softmax_rows(Tensor a, double temperature);
/// Euclidean norm along an axis (0: per column, 1: per row), floored at 1e-12.
Tensor l2norm(Tensor a, int axis);
/// Rows divided by their Euclidean norm (floored at 1e-12).
Tensor normalize_rows(Tensor a);

/// S * x for a constant sparse S (real); x may be complex.
Tensor sparse_matmul(const SparseMatrix& s, Tensor x);
/// Spectral heat diffusion Phi exp(-lambda t) Phi^T M u. t is 1 x c (c
/// divides u.cols()); column j of u uses t[j % c].
Tensor diffusion(const SpectralBasis& basis, Tensor u, Tensor t);

/// C = argmin ||C A - B||_F^2 + gamma sum_ij D_ij |C_ij|^2, solved row by row
/// with c_i = b_i A^H (A A^H + gamma diag(D_i))^-1. A is kx x d, B is ky x d,
/// D is a constant ky x kx mask. Real or complex (A, B of the same kind).
Tensor ridge_solve(Tensor a, Tensor b, const Eigen::MatrixXd& mask, double gamma);

/// Unitary polar factor U V^H of a square complex matrix M = U S V^H.
Tensor unitary_polar(Tensor m);

// Vector-neuron helpers on n x 3c features (column d * c + channel).
/// Sum over the VN dimension: n x 3c -> n x c.
Tensor vn_sum(Tensor x);
/// Repeat an n x c invariant across the VN dimension: -> n x 3c.
Tensor vn_broadcast(Tensor g);
/// Channel mixing W (c_out x c_in) applied to each VN dimension; x may be complex.
Tensor vn_linear(Tensor x, Tensor w);
/// Per vertex and channel: v if <v,k> >= 0 else v - <v,k> k / max(|k|^2, 1e-24).
Tensor vn_relu_dir(Tensor u, Tensor k);
/// Each 3-vector divided by max(|v|, 1e-12).
Tensor vn_normalize(Tensor x);

struct GradCheckOptions {
  double step = 1e-6;
  /// Coordinates checked per input; larger inputs are subsampled.
  int max_coords = 256;
  std::uint64_t seed = 7;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  long checked = 0;
  long nan_sites = 0;
};

using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

/// Central differences against the reverse sweep. The error is the largest
/// coordinate difference divided by the largest gradient magnitude.
GradCheckResult gradient_check(const ScalarFn& f, const std::vector<Eigen::MatrixXd>& inputs,
                               const GradCheckOptions& options = {});

}  // namespace rino::ad
