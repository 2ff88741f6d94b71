#include "rino/autodiff.hpp"

#include "rino/error.hpp"
#include "rino/operators.hpp"

#include <Eigen/Cholesky>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace rino::ad {
namespace {

using Mat = Eigen::MatrixXd;
using CMat = Eigen::MatrixXcd;
using Node = Tape::Node;

constexpr double kFloor = 1e-12;     // norm floor
constexpr double kDirFloor = 1e-24;  // squared-norm floor of VN-ReLU directions

std::string shape_str(const Tensor& t) {
  std::ostringstream s;
  s << t.rows() << "x" << t.cols() << (t.is_complex() ? " complex" : "");
  return s.str();
}

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw UsageError(std::string("autodiff ") + op + ": " + detail);
}

Tape& tape_of(const Tensor& a) {
  if (!a.valid()) throw UsageError("autodiff: operation on an empty tensor");
  return *a.tape();
}

Tape& common_tape(const Tensor& a, const Tensor& b) {
  Tape& t = tape_of(a);
  t.check_owner(b);
  return t;
}

CMat to_complex(const Node& n) {
  if (!n.complex) return n.re.cast<std::complex<double>>();
  CMat z(n.re.rows(), n.re.cols());
  z.real() = n.re;
  z.imag() = n.im;
  return z;
}

CMat grad_complex(const Node& n) {
  if (n.grad_im.size() == 0) return n.grad_re.cast<std::complex<double>>();
  CMat z(n.grad_re.rows(), n.grad_re.cols());
  z.real() = n.grad_re;
  z.imag() = n.grad_im;
  return z;
}

Node make_node(std::vector<int> parents, const Tape& tape) {
  Node n;
  for (int p : parents) n.requires_grad = n.requires_grad || tape.node(p).requires_grad;
  n.parents = std::move(parents);
  return n;
}

Tensor emit_real(Tape& tape, Mat value, std::vector<int> parents, std::function<void(Tape&, const Node&)> bwd) {
  Node n = make_node(std::move(parents), tape);
  n.re = std::move(value);
  if (n.requires_grad) n.backward = std::move(bwd);
  return tape.record(std::move(n));
}

Tensor emit_complex(Tape& tape, const CMat& value, std::vector<int> parents,
                    std::function<void(Tape&, const Node&)> bwd) {
  Node n = make_node(std::move(parents), tape);
  n.complex = true;
  n.re = value.real();
  n.im = value.imag();
  if (n.requires_grad) n.backward = std::move(bwd);
  return tape.record(std::move(n));
}

void accumulate_complex(Tape& tape, int id, const CMat& g) {
  const Mat gr = g.real();
  const Mat gi = g.imag();
  tape.accumulate(id, gr, &gi);
}

// A map that acts identically and independently on the real and imaginary
// planes, with real coefficients. Its adjoint acts the same way on gradients.
Tensor planewise(Tensor a, const std::function<Mat(const Mat&)>& fwd, std::function<Mat(const Mat&)> adj) {
  Tape& tape = tape_of(a);
  const Node& na = tape.node(a.id());
  const int ia = a.id();
  auto bwd = [ia, adj](Tape& t, const Node& self) {
    const Mat gr = adj(self.grad_re);
    if (self.grad_im.size() != 0) {
      const Mat gi = adj(self.grad_im);
      t.accumulate(ia, gr, &gi);
    } else {
      t.accumulate(ia, gr);
    }
  };
  if (!na.complex) return emit_real(tape, fwd(na.re), {ia}, bwd);
  Node n = make_node({ia}, tape);
  n.complex = true;
  n.re = fwd(na.re);
  n.im = fwd(na.im);
  if (n.requires_grad) n.backward = bwd;
  return tape.record(std::move(n));
}

Mat apply_trans(const Mat& m, Trans t) { return t == Trans::kN ? m : Mat(m.transpose()); }
CMat apply_trans(const CMat& m, Trans t) {
  switch (t) {
    case Trans::kN: return m;
    case Trans::kT: return m.transpose();
    case Trans::kH: return m.adjoint();
  }
  return m;
}
// Gradient with respect to X given the gradient with respect to op(X).
CMat untrans_grad(const CMat& g, Trans t) {
  switch (t) {
    case Trans::kN: return g;
    case Trans::kT: return g.transpose();
    case Trans::kH: return g.adjoint();
  }
  return g;
}

void require_real(const Tensor& a, const char* op) {
  if (a.is_complex()) shape_error(op, "expects a real tensor, got " + shape_str(a));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    shape_error(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

Tensor elementwise_real(Tensor a, const char* op, const std::function<Mat(const Mat&)>& f,
                        std::function<Mat(const Mat& x, const Mat& y, const Mat& g)> dfdx) {
  require_real(a, op);
  Tape& tape = tape_of(a);
  const int ia = a.id();
  const Mat& x = tape.node(ia).re;
  return emit_real(tape, f(x), {ia}, [ia, dfdx](Tape& t, const Node& self) {
    t.accumulate(ia, dfdx(t.node(ia).re, self.re, self.grad_re));
  });
}

long vn_channels(const Tensor& x, const char* op) {
  if (x.cols() % 3 != 0) shape_error(op, "VN feature width must be a multiple of 3, got " + shape_str(x));
  return x.cols() / 3;
}

template <typename Scalar>
using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
struct RidgeFactors {
  std::vector<Eigen::LLT<MatT<Scalar>>> rows;
};

template <typename Scalar>
MatT<Scalar> ridge_forward(const MatT<Scalar>& a, const MatT<Scalar>& b, const Mat& mask, double gamma,
                           RidgeFactors<Scalar>& factors) {
  const long kx = a.rows(), ky = b.rows();
  const MatT<Scalar> gram = a * a.adjoint();
  const MatT<Scalar> rhs = a * b.adjoint();  // column i is A b_i^H
  MatT<Scalar> c(ky, kx);
  factors.rows.clear();
  factors.rows.reserve(static_cast<std::size_t>(ky));
  for (long i = 0; i < ky; ++i) {
    MatT<Scalar> n = gram;
    for (long j = 0; j < kx; ++j) n(j, j) += gamma * mask(i, j);
    factors.rows.emplace_back(n);
    if (factors.rows.back().info() != Eigen::Success) {
      throw NumericalError("ridge_solve: normal matrix is not positive definite (increase gamma)");
    }
    c.row(i) = factors.rows.back().solve(rhs.col(i)).adjoint();
  }
  return c;
}

}  // namespace

// ---------------------------------------------------------------- Tensor

long Tensor::rows() const { return tape_->node(id_).re.rows(); }
long Tensor::cols() const { return tape_->node(id_).re.cols(); }
bool Tensor::is_complex() const { return tape_->node(id_).complex; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }
std::vector<long> Tensor::shape() const {
  if (is_complex()) return {rows(), cols(), 2};
  return {rows(), cols()};
}
const Eigen::MatrixXd& Tensor::re() const { return tape_->node(id_).re; }
const Eigen::MatrixXd& Tensor::im() const { return tape_->node(id_).im; }
Eigen::MatrixXcd Tensor::complex_value() const { return to_complex(tape_->node(id_)); }
double Tensor::item() const {
  const Node& n = tape_->node(id_);
  if (n.complex || n.re.rows() != 1 || n.re.cols() != 1) throw UsageError("item() requires a real 1x1 tensor");
  return n.re(0, 0);
}

// ---------------------------------------------------------------- Tape

Tensor Tape::record(Node node) {
  nodes_.push_back(std::move(node));
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

const Tape::Node& Tape::node(int id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size())) throw UsageError("autodiff: tensor is not on this tape");
  return nodes_[static_cast<std::size_t>(id)];
}

void Tape::check_owner(const Tensor& t) const {
  if (t.tape() != this || t.id() < 0 || t.id() >= static_cast<int>(nodes_.size())) {
    throw UsageError("autodiff: tensor is not on this tape");
  }
}

Tensor Tape::constant(Eigen::MatrixXd value) {
  Node n;
  n.re = std::move(value);
  return record(std::move(n));
}

Tensor Tape::constant(Eigen::MatrixXd re, Eigen::MatrixXd im) {
  if (re.rows() != im.rows() || re.cols() != im.cols()) throw UsageError("autodiff: real/imag shape mismatch");
  Node n;
  n.complex = true;
  n.re = std::move(re);
  n.im = std::move(im);
  return record(std::move(n));
}

Tensor Tape::constant(const Eigen::MatrixXcd& value) { return constant(value.real(), value.imag()); }

Tensor Tape::variable(Eigen::MatrixXd value) {
  Node n;
  n.re = std::move(value);
  n.requires_grad = true;
  return record(std::move(n));
}

Tensor Tape::variable(Eigen::MatrixXd re, Eigen::MatrixXd im) {
  Tensor t = constant(std::move(re), std::move(im));
  nodes_[static_cast<std::size_t>(t.id())].requires_grad = true;
  return t;
}

void Tape::accumulate(int id, const Eigen::MatrixXd& g_re, const Eigen::MatrixXd* g_im) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad_re = g_re;
    if (n.complex) n.grad_im = g_im ? *g_im : Eigen::MatrixXd::Zero(g_re.rows(), g_re.cols());
    n.has_grad = true;
    return;
  }
  n.grad_re += g_re;
  if (n.complex && g_im) n.grad_im += *g_im;
}

void Tape::backward(Tensor root) {
  check_owner(root);
  const Node& r = node(root.id());
  if (r.complex || r.re.size() != 1) throw UsageError("backward: root must be a real 1x1 tensor");
  if (!r.requires_grad) return;
  // Intermediate adjoints belong to this sweep only; leaves keep accumulating.
  for (auto& n : nodes_) {
    if (n.backward) {
      n.has_grad = false;
      n.grad_re.resize(0, 0);
      n.grad_im.resize(0, 0);
    }
  }
  accumulate(root.id(), Eigen::MatrixXd::Constant(1, 1, 1.0));
  for (int i = root.id(); i >= 0; --i) {
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.has_grad && n.backward) n.backward(*this, n);
  }
}

void Tape::zero_grad() {
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad_re.resize(0, 0);
    n.grad_im.resize(0, 0);
  }
}

Eigen::MatrixXd Tape::grad(Tensor t) const {
  check_owner(t);
  const Node& n = node(t.id());
  if (!n.has_grad) return Eigen::MatrixXd::Zero(n.re.rows(), n.re.cols());
  return n.grad_re;
}

Eigen::MatrixXd Tape::grad_im(Tensor t) const {
  check_owner(t);
  const Node& n = node(t.id());
  if (!n.has_grad || n.grad_im.size() == 0) return Eigen::MatrixXd::Zero(n.re.rows(), n.re.cols());
  return n.grad_im;
}

// ---------------------------------------------------------------- ops

Tensor add(Tensor a, Tensor b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  auto bwd = [ia, ib](Tape& t, const Node& self) {
    const Mat* gi = self.grad_im.size() ? &self.grad_im : nullptr;
    t.accumulate(ia, self.grad_re, gi);
    t.accumulate(ib, self.grad_re, gi);
  };
  if (!a.is_complex() && !b.is_complex()) return emit_real(tape, a.re() + b.re(), {ia, ib}, bwd);
  return emit_complex(tape, a.complex_value() + b.complex_value(), {ia, ib}, bwd);
}

Tensor sub(Tensor a, Tensor b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  auto bwd = [ia, ib](Tape& t, const Node& self) {
    const Mat* gi = self.grad_im.size() ? &self.grad_im : nullptr;
    t.accumulate(ia, self.grad_re, gi);
    const Mat ngr = -self.grad_re;
    if (gi) {
      const Mat ngi = -self.grad_im;
      t.accumulate(ib, ngr, &ngi);
    } else {
      t.accumulate(ib, ngr);
    }
  };
  if (!a.is_complex() && !b.is_complex()) return emit_real(tape, a.re() - b.re(), {ia, ib}, bwd);
  return emit_complex(tape, a.complex_value() - b.complex_value(), {ia, ib}, bwd);
}

Tensor scale(Tensor a, double s) {
  return planewise(a, [s](const Mat& x) { return Mat(s * x); }, [s](const Mat& g) { return Mat(s * g); });
}

Tensor mul(Tensor a, Tensor b) {
  Tape& tape = common_tape(a, b);
  require_same_shape(a, b, "mul");
  const int ia = a.id(), ib = b.id();
  if (!a.is_complex() && !b.is_complex()) {
    return emit_real(tape, a.re().cwiseProduct(b.re()), {ia, ib}, [ia, ib](Tape& t, const Node& self) {
      t.accumulate(ia, self.grad_re.cwiseProduct(t.node(ib).re));
      t.accumulate(ib, self.grad_re.cwiseProduct(t.node(ia).re));
    });
  }
  return emit_complex(tape, a.complex_value().cwiseProduct(b.complex_value()), {ia, ib},
                      [ia, ib](Tape& t, const Node& self) {
                        const CMat g = grad_complex(self);
                        accumulate_complex(t, ia, g.cwiseProduct(to_complex(t.node(ib)).conjugate()));
                        accumulate_complex(t, ib, g.cwiseProduct(to_complex(t.node(ia)).conjugate()));
                      });
}

Tensor matmul(Tensor a, Tensor b, Trans ta, Trans tb) {
  Tape& tape = common_tape(a, b);
  const long ar = (ta == Trans::kN) ? a.rows() : a.cols();
  const long ac = (ta == Trans::kN) ? a.cols() : a.rows();
  const long br = (tb == Trans::kN) ? b.rows() : b.cols();
  const long bc = (tb == Trans::kN) ? b.cols() : b.rows();
  if (ac != br) shape_error("matmul", "inner dimensions differ: " + shape_str(a) + " vs " + shape_str(b));
  (void)ar;
  (void)bc;
  const int ia = a.id(), ib = b.id();
  if (!a.is_complex() && !b.is_complex()) {
    Mat z = apply_trans(a.re(), ta) * apply_trans(b.re(), tb);
    return emit_real(tape, std::move(z), {ia, ib}, [ia, ib, ta, tb](Tape& t, const Node& self) {
      const Node& na = t.node(ia);
      const Node& nb = t.node(ib);
      if (na.requires_grad) {
        // d/d op(A) = G op(B)^T
        Mat g_op = tb == Trans::kN ? Mat(self.grad_re * nb.re.transpose()) : Mat(self.grad_re * nb.re);
        t.accumulate(ia, ta == Trans::kN ? g_op : Mat(g_op.transpose()));
      }
      if (nb.requires_grad) {
        Mat g_op = ta == Trans::kN ? Mat(na.re.transpose() * self.grad_re) : Mat(na.re * self.grad_re);
        t.accumulate(ib, tb == Trans::kN ? g_op : Mat(g_op.transpose()));
      }
    });
  }
  const CMat z = apply_trans(a.complex_value(), ta) * apply_trans(b.complex_value(), tb);
  return emit_complex(tape, z, {ia, ib}, [ia, ib, ta, tb](Tape& t, const Node& self) {
    const CMat g = grad_complex(self);
    const Node& na = t.node(ia);
    const Node& nb = t.node(ib);
    if (na.requires_grad) {
      const CMat g_op = g * apply_trans(to_complex(nb), tb).adjoint();
      accumulate_complex(t, ia, untrans_grad(g_op, ta));
    }
    if (nb.requires_grad) {
      const CMat g_op = apply_trans(to_complex(na), ta).adjoint() * g;
      accumulate_complex(t, ib, untrans_grad(g_op, tb));
    }
  });
}

Tensor conj(Tensor a) {
  Tape& tape = tape_of(a);
  if (!a.is_complex()) return planewise(a, [](const Mat& x) { return x; }, [](const Mat& g) { return g; });
  const int ia = a.id();
  return emit_complex(tape, a.complex_value().conjugate(), {ia}, [ia](Tape& t, const Node& self) {
    accumulate_complex(t, ia, grad_complex(self).conjugate());
  });
}

Tensor real_part(Tensor a) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  return emit_real(tape, a.re(), {ia}, [ia](Tape& t, const Node& self) {
    const Mat zero = Mat::Zero(self.grad_re.rows(), self.grad_re.cols());
    t.accumulate(ia, self.grad_re, &zero);
  });
}

Tensor imag_part(Tensor a) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  Mat v = a.is_complex() ? a.im() : Mat::Zero(a.rows(), a.cols());
  return emit_real(tape, std::move(v), {ia}, [ia](Tape& t, const Node& self) {
    const Mat zero = Mat::Zero(self.grad_re.rows(), self.grad_re.cols());
    t.accumulate(ia, zero, &self.grad_re);
  });
}

Tensor make_complex(Tensor re, Tensor im) {
  Tape& tape = common_tape(re, im);
  require_real(re, "make_complex");
  require_real(im, "make_complex");
  require_same_shape(re, im, "make_complex");
  const int ir = re.id(), ii = im.id();
  Node n = make_node({ir, ii}, tape);
  n.complex = true;
  n.re = re.re();
  n.im = im.re();
  if (n.requires_grad) {
    n.backward = [ir, ii](Tape& t, const Node& self) {
      t.accumulate(ir, self.grad_re);
      t.accumulate(ii, self.grad_im);
    };
  }
  return tape.record(std::move(n));
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_cols: no inputs");
  Tape& tape = tape_of(parts[0]);
  bool complex = false;
  long cols = 0;
  std::vector<int> ids;
  std::vector<long> offsets;
  for (const auto& p : parts) {
    tape.check_owner(p);
    if (p.rows() != parts[0].rows()) shape_error("concat_cols", "row counts differ");
    complex = complex || p.is_complex();
    ids.push_back(p.id());
    offsets.push_back(cols);
    cols += p.cols();
  }
  const long rows = parts[0].rows();
  Mat re(rows, cols), im;
  if (complex) im = Mat::Zero(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    re.middleCols(offsets[k], parts[k].cols()) = parts[k].re();
    if (complex && parts[k].is_complex()) im.middleCols(offsets[k], parts[k].cols()) = parts[k].im();
  }
  Node n = make_node(ids, tape);
  n.complex = complex;
  n.re = std::move(re);
  n.im = std::move(im);
  if (n.requires_grad) {
    n.backward = [ids, offsets](Tape& t, const Node& self) {
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const long w = t.node(ids[k]).re.cols();
        const Mat gr = self.grad_re.middleCols(offsets[k], w);
        if (self.grad_im.size()) {
          const Mat gi = self.grad_im.middleCols(offsets[k], w);
          t.accumulate(ids[k], gr, &gi);
        } else {
          t.accumulate(ids[k], gr);
        }
      }
    };
  }
  return tape.record(std::move(n));
}

Tensor slice_cols(Tensor a, long start, long count) {
  if (start < 0 || count < 0 || start + count > a.cols()) shape_error("slice_cols", "range outside " + shape_str(a));
  const long total = a.cols();
  return planewise(
      a, [start, count](const Mat& x) { return Mat(x.middleCols(start, count)); },
      [start, count, total](const Mat& g) {
        Mat out = Mat::Zero(g.rows(), total);
        out.middleCols(start, count) = g;
        return out;
      });
}

Tensor sum(Tensor a, int axis) {
  if (axis != 0 && axis != 1) shape_error("sum", "axis must be 0 or 1");
  const long r = a.rows(), c = a.cols();
  if (axis == 0) {
    return planewise(
        a, [](const Mat& x) { return Mat(x.colwise().sum()); },
        [r](const Mat& g) { return Mat(g.replicate(r, 1)); });
  }
  return planewise(
      a, [](const Mat& x) { return Mat(x.rowwise().sum()); }, [c](const Mat& g) { return Mat(g.replicate(1, c)); });
}

Tensor sum_all(Tensor a) {
  const long r = a.rows(), c = a.cols();
  return planewise(
      a, [](const Mat& x) { return Mat::Constant(1, 1, x.sum()); },
      [r, c](const Mat& g) { return Mat(Mat::Constant(r, c, g(0, 0))); });
}

Tensor sum_sq(Tensor a) {
  Tape& tape = tape_of(a);
  const int ia = a.id();
  double v = a.re().squaredNorm();
  if (a.is_complex()) v += a.im().squaredNorm();
  return emit_real(tape, Mat::Constant(1, 1, v), {ia}, [ia](Tape& t, const Node& self) {
    const Node& na = t.node(ia);
    const double g = 2.0 * self.grad_re(0, 0);
    const Mat gr = g * na.re;
    if (na.complex) {
      const Mat gi = g * na.im;
      t.accumulate(ia, gr, &gi);
    } else {
      t.accumulate(ia, gr);
    }
  });
}

Tensor tanh(Tensor a) {
  return elementwise_real(
      a, "tanh", [](const Mat& x) { return Mat(x.array().tanh()); },
      [](const Mat&, const Mat& y, const Mat& g) { return Mat(g.array() * (1.0 - y.array().square())); });
}

Tensor exp(Tensor a) {
  return elementwise_real(
      a, "exp", [](const Mat& x) { return Mat(x.array().exp()); },
      [](const Mat&, const Mat& y, const Mat& g) { return Mat(g.cwiseProduct(y)); });
}

Tensor reciprocal(Tensor a) {
  require_real(a, "reciprocal");
  if ((a.re().array() == 0.0).any()) throw NumericalError("reciprocal: division by zero");
  return elementwise_real(
      a, "reciprocal", [](const Mat& x) { return Mat(x.array().inverse()); },
      [](const Mat&, const Mat& y, const Mat& g) { return Mat(-g.array() * y.array().square()); });
}

Tensor softmax_rows(Tensor a, double temperature) {
  require_real(a, "softmax_rows");
  if (!(temperature > 0.0)) throw UsageError("softmax_rows: temperature must be positive");
  Mat z = a.re() / temperature;
  z.colwise() -= z.rowwise().maxCoeff();
  z = z.array().exp();
  z.array().colwise() /= z.rowwise().sum().array();
  const int ia = a.id();
  return emit_real(tape_of(a), std::move(z), {ia}, [ia, temperature](Tape& t, const Node& self) {
    const Mat& p = self.re;
    const Eigen::VectorXd inner = self.grad_re.cwiseProduct(p).rowwise().sum();
    Mat g = self.grad_re;
    g.colwise() -= inner;
    t.accumulate(ia, Mat(g.cwiseProduct(p) / temperature));
  });
}

Tensor l2norm(Tensor a, int axis) {
  require_real(a, "l2norm");
  if (axis != 0 && axis != 1) shape_error("l2norm", "axis must be 0 or 1");
  Mat raw = axis == 0 ? Mat(a.re().colwise().norm()) : Mat(a.re().rowwise().norm());
  Mat out = raw.cwiseMax(kFloor);
  const int ia = a.id();
  return emit_real(tape_of(a), out, {ia}, [ia, axis, raw](Tape& t, const Node& self) {
    const Mat& x = t.node(ia).re;
    Mat coef = self.grad_re;
    for (long i = 0; i < coef.size(); ++i) coef(i) = raw(i) > kFloor ? coef(i) / raw(i) : 0.0;
    if (axis == 0) {
      t.accumulate(ia, Mat(x.array().rowwise() * coef.row(0).array()));
    } else {
      t.accumulate(ia, Mat(x.array().colwise() * coef.col(0).array()));
    }
  });
}

Tensor normalize_rows(Tensor a) {
  require_real(a, "normalize_rows");
  const Eigen::VectorXd norms = a.re().rowwise().norm().cwiseMax(kFloor);
  Mat y = a.re().array().colwise() / norms.array();
  const int ia = a.id();
  return emit_real(tape_of(a), std::move(y), {ia}, [ia, norms](Tape& t, const Node& self) {
    const Eigen::VectorXd raw = t.node(ia).re.rowwise().norm();
    Mat g = self.grad_re;
    for (long i = 0; i < g.rows(); ++i) {
      if (raw[i] > kFloor) g.row(i) -= g.row(i).dot(self.re.row(i)) * self.re.row(i);
      g.row(i) /= norms[i];
    }
    t.accumulate(ia, g);
  });
}

Tensor sparse_matmul(const SparseMatrix& s, Tensor x) {
  if (s.cols() != x.rows()) shape_error("sparse_matmul", "operator columns differ from " + shape_str(x));
  const SparseMatrix* sp = &s;
  return planewise(
      x, [sp](const Mat& v) { return Mat(*sp * v); }, [sp](const Mat& g) { return Mat(sp->transpose() * g); });
}

Tensor diffusion(const SpectralBasis& basis, Tensor u, Tensor t) {
  Tape& tape = common_tape(u, t);
  require_real(u, "diffusion");
  require_real(t, "diffusion");
  if (u.rows() != basis.evecs.rows()) shape_error("diffusion", "feature rows differ from basis size");
  if (t.rows() != 1 || t.cols() == 0 || u.cols() % t.cols() != 0) {
    shape_error("diffusion", "time vector must be 1 x c with c dividing " + std::to_string(u.cols()));
  }
  if ((t.re().array() < 0.0).any()) throw NumericalError("diffusion: negative diffusion time");
  const SpectralBasis* b = &basis;
  const long c = t.cols();
  Mat coef = basis.evecs.transpose() * (basis.mass.asDiagonal() * u.re());
  Mat decay(coef.rows(), coef.cols());
  for (long j = 0; j < coef.cols(); ++j) decay.col(j) = (-basis.evals.array() * t.re()(0, j % c)).exp();
  Mat out = basis.evecs * coef.cwiseProduct(decay);
  const int iu = u.id(), it = t.id();
  return emit_real(tape, std::move(out), {iu, it}, [b, c, iu, it, coef, decay](Tape& tp, const Node& self) {
    const Mat ghat = b->evecs.transpose() * self.grad_re;  // k x cols
    const Mat gd = ghat.cwiseProduct(decay);
    if (tp.node(iu).requires_grad) tp.accumulate(iu, Mat(b->mass.asDiagonal() * (b->evecs * gd)));
    if (tp.node(it).requires_grad) {
      Mat gt = Mat::Zero(1, c);
      const Mat weighted = (gd.cwiseProduct(coef)).array().colwise() * (-b->evals.array());
      const Eigen::RowVectorXd per_col = weighted.colwise().sum();
      for (long j = 0; j < per_col.size(); ++j) gt(0, j % c) += per_col[j];
      tp.accumulate(it, gt);
    }
  });
}

Tensor ridge_solve(Tensor a, Tensor b, const Eigen::MatrixXd& mask, double gamma) {
  Tape& tape = common_tape(a, b);
  if (a.is_complex() != b.is_complex()) shape_error("ridge_solve", "A and B must both be real or both complex");
  if (a.cols() != b.cols()) shape_error("ridge_solve", "A and B need the same number of feature columns");
  if (mask.rows() != b.rows() || mask.cols() != a.rows()) shape_error("ridge_solve", "mask must be ky x kx");
  if (gamma < 0.0) throw UsageError("ridge_solve: gamma must be nonnegative");
  if (gamma == 0.0 && a.cols() < a.rows()) {
    throw NumericalError("ridge_solve: normal matrix is singular with gamma = 0 and fewer features (" +
                         std::to_string(a.cols()) + ") than basis functions (" + std::to_string(a.rows()) +
                         "); use gamma > 0");
  }
  const int ia = a.id(), ib = b.id();
  if (!a.is_complex()) {
    auto factors = std::make_shared<RidgeFactors<double>>();
    Mat c = ridge_forward<double>(a.re(), b.re(), mask, gamma, *factors);
    return emit_real(tape, std::move(c), {ia, ib}, [ia, ib, factors](Tape& t, const Node& self) {
      const Mat& av = t.node(ia).re;
      const Mat& bv = t.node(ib).re;
      Mat r(self.re.rows(), self.re.cols());
      for (long i = 0; i < r.rows(); ++i) {
        r.row(i) = factors->rows[static_cast<std::size_t>(i)].solve(self.grad_re.row(i).transpose()).transpose();
      }
      t.accumulate(ib, Mat(r * av));
      t.accumulate(ia, Mat(r.transpose() * bv - (self.re.transpose() * r + r.transpose() * self.re) * av));
    });
  }
  auto factors = std::make_shared<RidgeFactors<std::complex<double>>>();
  const CMat c = ridge_forward<std::complex<double>>(a.complex_value(), b.complex_value(), mask, gamma, *factors);
  return emit_complex(tape, c, {ia, ib}, [ia, ib, factors](Tape& t, const Node& self) {
    const CMat av = to_complex(t.node(ia));
    const CMat bv = to_complex(t.node(ib));
    const CMat cv = to_complex(self);
    const CMat g = grad_complex(self);
    CMat r(g.rows(), g.cols());
    for (long i = 0; i < r.rows(); ++i) {
      r.row(i) = factors->rows[static_cast<std::size_t>(i)].solve(g.row(i).adjoint()).adjoint();
    }
    accumulate_complex(t, ib, r * av);
    accumulate_complex(t, ia, r.adjoint() * bv - (cv.adjoint() * r + r.adjoint() * cv) * av);
  });
}

Tensor unitary_polar(Tensor m) {
  Tape& tape = tape_of(m);
  if (m.rows() != m.cols()) shape_error("unitary_polar", "expects a square matrix, got " + shape_str(m));
  const CMat mv = m.complex_value();
  Eigen::JacobiSVD<CMat> svd(mv, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const CMat u = svd.matrixU(), v = svd.matrixV();
  const Eigen::VectorXd s = svd.singularValues();
  const int im_ = m.id();
  return emit_complex(tape, u * v.adjoint(), {im_}, [im_, u, v, s](Tape& t, const Node& self) {
    const CMat gh = u.adjoint() * grad_complex(self) * v;
    const long k = s.size();
    const double floor = 1e-14 * std::max(s.size() ? s[0] : 0.0, 1e-300);
    CMat y(k, k);
    for (long i = 0; i < k; ++i) {
      for (long j = 0; j < k; ++j) y(i, j) = (gh(i, j) - std::conj(gh(j, i))) / std::max(s[i] + s[j], floor);
    }
    accumulate_complex(t, im_, u * y * v.adjoint());
  });
}

Tensor vn_sum(Tensor x) {
  const long c = vn_channels(x, "vn_sum");
  return planewise(
      x, [c](const Mat& v) { return Mat(v.leftCols(c) + v.middleCols(c, c) + v.rightCols(c)); },
      [](const Mat& g) { return Mat(g.replicate(1, 3)); });
}

Tensor vn_broadcast(Tensor g) {
  const long c = g.cols();
  return planewise(
      g, [](const Mat& v) { return Mat(v.replicate(1, 3)); },
      [c](const Mat& gr) { return Mat(gr.leftCols(c) + gr.middleCols(c, c) + gr.rightCols(c)); });
}

Tensor vn_linear(Tensor x, Tensor w) {
  Tape& tape = common_tape(x, w);
  const long c = vn_channels(x, "vn_linear");
  if (w.cols() != c) {
    shape_error("vn_linear", "weight " + shape_str(w) + " does not match " + std::to_string(c) + " channels");
  }
  const long co = w.rows();
  const int ix = x.id(), iw = w.id();
  // Y_d = X_d W^T for each VN dimension d, on column blocks in place.
  auto apply = [c, co](const Mat& xv, const Mat& wv, Mat& out, double sign) {
    for (long d = 0; d < 3; ++d) out.middleCols(d * co, co).noalias() += sign * xv.middleCols(d * c, c) * wv.transpose();
  };
  // dX_d += G_d W, dW += G_d^T X_d.
  auto adjoint_x = [c, co](const Mat& g, const Mat& wv, Mat& gx, double sign) {
    for (long d = 0; d < 3; ++d) gx.middleCols(d * c, c).noalias() += sign * g.middleCols(d * co, co) * wv;
  };
  auto adjoint_w = [c, co](const Mat& g, const Mat& xv, Mat& gw, double sign) {
    for (long d = 0; d < 3; ++d) gw.noalias() += sign * g.middleCols(d * co, co).transpose() * xv.middleCols(d * c, c);
  };
  const long n = x.rows();
  if (!x.is_complex() && !w.is_complex()) {
    Mat out = Mat::Zero(n, 3 * co);
    apply(x.re(), w.re(), out, 1.0);
    return emit_real(tape, std::move(out), {ix, iw}, [=](Tape& t, const Node& self) {
      const Node& nx = t.node(ix);
      const Node& nw = t.node(iw);
      if (nx.requires_grad) {
        Mat gx = Mat::Zero(nx.re.rows(), nx.re.cols());
        adjoint_x(self.grad_re, nw.re, gx, 1.0);
        t.accumulate(ix, gx);
      }
      if (nw.requires_grad) {
        Mat gw = Mat::Zero(nw.re.rows(), nw.re.cols());
        adjoint_w(self.grad_re, nx.re, gw, 1.0);
        t.accumulate(iw, gw);
      }
    });
  }
  // Complex: (Xr + i Xi)(Wr + i Wi)^T on real planes.
  const Mat zx = Mat::Zero(x.rows(), x.cols());
  const Mat zw = Mat::Zero(w.rows(), w.cols());
  const Mat& xr = x.re();
  const Mat& xi = x.is_complex() ? x.im() : zx;
  const Mat& wr = w.re();
  const Mat& wi = w.is_complex() ? w.im() : zw;
  Mat out_re = Mat::Zero(n, 3 * co), out_im = Mat::Zero(n, 3 * co);
  apply(xr, wr, out_re, 1.0);
  apply(xi, wi, out_re, -1.0);
  apply(xr, wi, out_im, 1.0);
  apply(xi, wr, out_im, 1.0);
  Node node = make_node({ix, iw}, tape);
  node.complex = true;
  node.re = std::move(out_re);
  node.im = std::move(out_im);
  if (node.requires_grad) {
    node.backward = [=](Tape& t, const Node& self) {
      const Node& nx = t.node(ix);
      const Node& nw = t.node(iw);
      const Mat& gr = self.grad_re;
      const Mat& gi = self.grad_im;
      const Mat xr2 = nx.re;
      const Mat xi2 = nx.complex ? nx.im : Mat::Zero(nx.re.rows(), nx.re.cols());
      const Mat wr2 = nw.re;
      const Mat wi2 = nw.complex ? nw.im : Mat::Zero(nw.re.rows(), nw.re.cols());
      // G_X = G conj(W) blockwise, G_W = (G^T conj(X)) blockwise.
      if (nx.requires_grad) {
        Mat gxr = Mat::Zero(xr2.rows(), xr2.cols()), gxi = gxr;
        adjoint_x(gr, wr2, gxr, 1.0);
        adjoint_x(gi, wi2, gxr, 1.0);
        adjoint_x(gi, wr2, gxi, 1.0);
        adjoint_x(gr, wi2, gxi, -1.0);
        t.accumulate(ix, gxr, &gxi);
      }
      if (nw.requires_grad) {
        Mat gwr = Mat::Zero(wr2.rows(), wr2.cols()), gwi = gwr;
        adjoint_w(gr, xr2, gwr, 1.0);
        adjoint_w(gi, xi2, gwr, 1.0);
        adjoint_w(gi, xr2, gwi, 1.0);
        adjoint_w(gr, xi2, gwi, -1.0);
        t.accumulate(iw, gwr, &gwi);
      }
    };
  }
  return tape.record(std::move(node));
}

Tensor vn_relu_dir(Tensor u, Tensor k) {
  Tape& tape = common_tape(u, k);
  require_real(u, "vn_relu");
  require_real(k, "vn_relu");
  require_same_shape(u, k, "vn_relu");
  const long c = vn_channels(u, "vn_relu");
  const long n = u.rows();
  const Mat& uv = u.re();
  const Mat& kv = k.re();
  Mat out = uv;
  for (long v = 0; v < n; ++v) {
    for (long ch = 0; ch < c; ++ch) {
      double s = 0.0, q = 0.0;
      for (long d = 0; d < 3; ++d) {
        s += uv(v, d * c + ch) * kv(v, d * c + ch);
        q += kv(v, d * c + ch) * kv(v, d * c + ch);
      }
      if (s >= 0.0) continue;
      const double f = s / std::max(q, kDirFloor);
      for (long d = 0; d < 3; ++d) out(v, d * c + ch) -= f * kv(v, d * c + ch);
    }
  }
  const int iu = u.id(), ik = k.id();
  return emit_real(tape, std::move(out), {iu, ik}, [iu, ik, c](Tape& t, const Node& self) {
    const Mat& uv2 = t.node(iu).re;
    const Mat& kv2 = t.node(ik).re;
    const Mat& g = self.grad_re;
    Mat gu = g;
    Mat gk = Mat::Zero(g.rows(), g.cols());
    for (long v = 0; v < g.rows(); ++v) {
      for (long ch = 0; ch < c; ++ch) {
        double s = 0.0, q = 0.0, gk_dot = 0.0;
        for (long d = 0; d < 3; ++d) {
          const long col = d * c + ch;
          s += uv2(v, col) * kv2(v, col);
          q += kv2(v, col) * kv2(v, col);
          gk_dot += g(v, col) * kv2(v, col);
        }
        if (s >= 0.0) continue;
        const bool clamped = q < kDirFloor;
        const double qq = std::max(q, kDirFloor);
        for (long d = 0; d < 3; ++d) {
          const long col = d * c + ch;
          gu(v, col) -= gk_dot / qq * kv2(v, col);
          gk(v, col) = -gk_dot / qq * uv2(v, col) - s / qq * g(v, col);
          if (!clamped) gk(v, col) += 2.0 * s * gk_dot / (qq * qq) * kv2(v, col);
        }
      }
    }
    t.accumulate(iu, gu);
    t.accumulate(ik, gk);
  });
}

Tensor vn_normalize(Tensor x) {
  require_real(x, "vn_normalize");
  const long c = vn_channels(x, "vn_normalize");
  const Mat& xv = x.re();
  Mat norms(xv.rows(), c);
  for (long ch = 0; ch < c; ++ch) {
    norms.col(ch) = (xv.col(ch).array().square() + xv.col(c + ch).array().square() +
                     xv.col(2 * c + ch).array().square())
                        .sqrt();
  }
  Mat out(xv.rows(), xv.cols());
  const Mat denom = norms.cwiseMax(kFloor);
  for (long d = 0; d < 3; ++d) out.middleCols(d * c, c) = xv.middleCols(d * c, c).cwiseQuotient(denom);
  const int ix = x.id();
  return emit_real(tape_of(x), std::move(out), {ix}, [ix, c, norms, denom](Tape& t, const Node& self) {
    const Mat& g = self.grad_re;
    const Mat& y = self.re;
    Mat inner = Mat::Zero(g.rows(), c);
    for (long d = 0; d < 3; ++d) inner += g.middleCols(d * c, c).cwiseProduct(y.middleCols(d * c, c));
    Mat gx(g.rows(), g.cols());
    for (long d = 0; d < 3; ++d) {
      Mat proj = g.middleCols(d * c, c) - inner.cwiseProduct(y.middleCols(d * c, c));
      // Below the floor the map is linear (x / floor).
      proj = (norms.array() > kFloor).select(proj, g.middleCols(d * c, c));
      gx.middleCols(d * c, c) = proj.cwiseQuotient(denom);
    }
    t.accumulate(ix, gx);
  });
}

// ---------------------------------------------------------------- checks

GradCheckResult gradient_check(const ScalarFn& f, const std::vector<Eigen::MatrixXd>& inputs,
                               const GradCheckOptions& options) {
  auto evaluate = [&](const std::vector<Eigen::MatrixXd>& xs) {
    Tape tape;
    std::vector<Tensor> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return f(tape, vars).item();
  };

  Tape tape;
  std::vector<Tensor> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  Tensor out = f(tape, vars);
  tape.backward(out);

  GradCheckResult result;
  std::mt19937_64 rng(options.seed);
  std::vector<Eigen::MatrixXd> analytic;
  double global = 0.0;
  for (const auto& v : vars) {
    analytic.push_back(tape.grad(v));
    global = std::max(global, analytic.back().cwiseAbs().maxCoeff());
  }
  std::vector<Eigen::MatrixXd> xs = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const long size = inputs[k].size();
    std::vector<long> coords(static_cast<std::size_t>(size));
    std::iota(coords.begin(), coords.end(), 0L);
    if (size > options.max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.max_coords));
    }
    double max_diff = 0.0, max_mag = 0.0;
    for (long idx : coords) {
      const double x0 = xs[k](idx);
      xs[k](idx) = x0 + options.step;
      const double fp = evaluate(xs);
      xs[k](idx) = x0 - options.step;
      const double fm = evaluate(xs);
      xs[k](idx) = x0;
      const double fd = (fp - fm) / (2.0 * options.step);
      const double ad = analytic[k](idx);
      if (!std::isfinite(fd) || !std::isfinite(ad)) {
        ++result.nan_sites;
        continue;
      }
      max_diff = std::max(max_diff, std::abs(fd - ad));
      max_mag = std::max({max_mag, std::abs(fd), std::abs(ad)});
      ++result.checked;
    }
    const double denom = std::max({max_mag, 1e-6 * global, 1e-300});
    result.max_rel_error = std::max(result.max_rel_error, max_diff / denom);
  }
  return result;
}

}  // namespace rino::ad
