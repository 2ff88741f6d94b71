#include "rino/operators.hpp"

#include "rino/error.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace rino {
namespace {

constexpr double kMinCotWeight = 1e-8;
constexpr double kDegenerateArea = 1e-14;

std::vector<std::vector<int>> vertex_neighbors(const Mesh& mesh) {
  std::vector<std::vector<int>> nbrs(static_cast<std::size_t>(mesh.num_vertices()));
  for (const auto& e : unique_edges(mesh)) {
    nbrs[e[0]].push_back(e[1]);
    nbrs[e[1]].push_back(e[0]);
  }
  for (auto& row : nbrs) std::sort(row.begin(), row.end());
  return nbrs;
}

// Per-edge cotangent weight 1/2 (cot alpha + cot beta), clamped from below.
std::vector<std::pair<std::array<int, 2>, double>> cotangent_weights(const Mesh& mesh,
                                                                    std::vector<std::string>* warnings) {
  const auto& v = mesh.vertices();
  const auto& t = mesh.triangles();
  const auto edges = unique_edges(mesh);
  std::vector<double> w(edges.size(), 0.0);
  auto edge_index = [&](int a, int b) {
    if (a > b) std::swap(a, b);
    const std::array<int, 2> key{a, b};
    return static_cast<std::size_t>(std::lower_bound(edges.begin(), edges.end(), key) - edges.begin());
  };
  int degenerate = 0;
  for (long f = 0; f < t.rows(); ++f) {
    const Eigen::Vector3d p[3] = {v.row(t(f, 0)), v.row(t(f, 1)), v.row(t(f, 2))};
    const double area2 = (p[1] - p[0]).cross(p[2] - p[0]).norm();
    if (0.5 * area2 < kDegenerateArea) {
      ++degenerate;
      continue;
    }
    for (int c = 0; c < 3; ++c) {
      // Angle at corner c is opposite the edge (c+1, c+2).
      const Eigen::Vector3d a = p[(c + 1) % 3] - p[c];
      const Eigen::Vector3d b = p[(c + 2) % 3] - p[c];
      const double cot = a.dot(b) / area2;
      w[edge_index(t(f, (c + 1) % 3), t(f, (c + 2) % 3))] += 0.5 * cot;
    }
  }
  if (degenerate > 0 && warnings) {
    warnings->push_back(std::to_string(degenerate) + " degenerate triangle(s) skipped in the cotangent Laplacian");
  }
  std::vector<std::pair<std::array<int, 2>, double>> out;
  out.reserve(edges.size());
  for (std::size_t e = 0; e < edges.size(); ++e) out.emplace_back(edges[e], std::max(w[e], kMinCotWeight));
  return out;
}

// Minimal rotation taking unit vector a onto unit vector b. For antiparallel
// vectors the rotation is a half turn about `fallback_axis` (orthogonalized).
Eigen::Matrix3d align_rotation(const Eigen::Vector3d& a, const Eigen::Vector3d& b,
                               const Eigen::Vector3d& fallback_axis) {
  const Eigen::Vector3d v = a.cross(b);
  const double c = a.dot(b);
  if (c < -1.0 + 1e-12) {
    Eigen::Vector3d axis = fallback_axis - fallback_axis.dot(a) * a;
    if (axis.norm() < 1e-12) axis = a.unitOrthogonal();
    return Eigen::AngleAxisd(std::numbers::pi, axis.normalized()).toRotationMatrix();
  }
  Eigen::Matrix3d vx;
  vx << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return Eigen::Matrix3d::Identity() + vx + vx * vx / (1.0 + c);
}

}  // namespace

SparseMatrix cotangent_laplacian(const Mesh& mesh, std::vector<std::string>* warnings) {
  const int n = mesh.num_vertices();
  std::vector<Eigen::Triplet<double>> trips;
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  for (const auto& [e, w] : cotangent_weights(mesh, warnings)) {
    trips.emplace_back(e[0], e[1], -w);
    trips.emplace_back(e[1], e[0], -w);
    diag[e[0]] += w;
    diag[e[1]] += w;
  }
  for (int i = 0; i < n; ++i) trips.emplace_back(i, i, diag[i]);
  SparseMatrix l(n, n);
  l.setFromTriplets(trips.begin(), trips.end());
  return l;
}

Eigen::VectorXd lumped_mass(const Mesh& mesh) {
  const Eigen::VectorXd areas = mesh.triangle_areas();
  Eigen::VectorXd m = Eigen::VectorXd::Zero(mesh.num_vertices());
  for (long f = 0; f < mesh.triangles().rows(); ++f) {
    for (int c = 0; c < 3; ++c) m[mesh.triangles()(f, c)] += areas[f] / 3.0;
  }
  return m;
}

TangentFrames tangent_frames(const Mesh& mesh) {
  const int n = mesh.num_vertices();
  const auto& v = mesh.vertices();
  const auto& t = mesh.triangles();
  Points normals = Points::Zero(n, 3);
  Points largest = Points::Zero(n, 3);
  Eigen::VectorXd largest_area = Eigen::VectorXd::Zero(n);
  for (long f = 0; f < t.rows(); ++f) {
    const Eigen::Vector3d p0 = v.row(t(f, 0)), p1 = v.row(t(f, 1)), p2 = v.row(t(f, 2));
    const Eigen::Vector3d cr = (p1 - p0).cross(p2 - p0);  // |cr| = 2 area
    for (int c = 0; c < 3; ++c) {
      normals.row(t(f, c)) += cr.transpose();
      if (cr.norm() > largest_area[t(f, c)]) {
        largest_area[t(f, c)] = cr.norm();
        largest.row(t(f, c)) = cr.transpose();
      }
    }
  }
  const auto nbrs = vertex_neighbors(mesh);
  TangentFrames fr{Points(n, 3), Points(n, 3), Points(n, 3)};
  for (int i = 0; i < n; ++i) {
    if (nbrs[i].empty()) throw DataError("vertex " + std::to_string(i) + " is isolated");
    Eigen::Vector3d nrm = normals.row(i);
    if (nrm.norm() < 1e-14 * std::max(1.0, largest_area[i])) nrm = largest.row(i);
    if (nrm.norm() == 0.0) nrm = Eigen::Vector3d::UnitZ();
    nrm.normalize();
    Eigen::Vector3d t1 = Eigen::Vector3d::Zero();
    for (int j : nbrs[i]) {
      const Eigen::Vector3d e = (v.row(j) - v.row(i)).transpose();
      const Eigen::Vector3d proj = e - e.dot(nrm) * nrm;
      if (proj.norm() > 1e-12 * std::max(e.norm(), 1e-300)) {
        t1 = proj.normalized();
        break;
      }
    }
    if (t1.isZero()) t1 = nrm.unitOrthogonal();
    fr.normal.row(i) = nrm.transpose();
    fr.t1.row(i) = t1.transpose();
    fr.t2.row(i) = nrm.cross(t1).transpose();
  }
  return fr;
}

double transport_angle(const TangentFrames& frames, int from, int to) {
  const Eigen::Vector3d n_from = frames.normal.row(from), n_to = frames.normal.row(to);
  const Eigen::Matrix3d r = align_rotation(n_from, n_to, frames.t1.row(from).transpose());
  const Eigen::Vector3d moved = r * frames.t1.row(from).transpose();
  return std::atan2(moved.dot(frames.t2.row(to)), moved.dot(frames.t1.row(to)));
}

Operators build_operators(const Mesh& mesh) {
  const int n = mesh.num_vertices();
  const auto& v = mesh.vertices();
  Operators ops;
  ops.mass = lumped_mass(mesh);
  ops.frames = tangent_frames(mesh);  // throws on isolated vertices
  if ((ops.mass.array() <= 0.0).any()) {
    throw DataError("vertex with zero lumped area (all incident triangles degenerate)");
  }
  const auto weights = cotangent_weights(mesh, &ops.warnings);
  {
    std::vector<Eigen::Triplet<double>> trips;
    Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
    for (const auto& [e, w] : weights) {
      trips.emplace_back(e[0], e[1], -w);
      trips.emplace_back(e[1], e[0], -w);
      diag[e[0]] += w;
      diag[e[1]] += w;
    }
    for (int i = 0; i < n; ++i) trips.emplace_back(i, i, diag[i]);
    ops.stiffness.resize(n, n);
    ops.stiffness.setFromTriplets(trips.begin(), trips.end());
  }

  // Gradient: per-vertex least-squares fit of the directional derivatives
  // along one-ring edges projected into the tangent plane.
  const auto nbrs = vertex_neighbors(mesh);
  std::vector<Eigen::Triplet<std::complex<double>>> gtrips;
  for (int i = 0; i < n; ++i) {
    const auto& ring = nbrs[i];
    const long deg = static_cast<long>(ring.size());
    Eigen::MatrixXd e(deg, 2);
    for (long r = 0; r < deg; ++r) {
      const Eigen::Vector3d d = (v.row(ring[r]) - v.row(i)).transpose();
      e(r, 0) = d.dot(ops.frames.t1.row(i));
      e(r, 1) = d.dot(ops.frames.t2.row(i));
    }
    Eigen::Matrix2d normal_eq = e.transpose() * e;
    normal_eq.diagonal().array() += 1e-10 * std::max(normal_eq.trace(), 1e-300);
    const Eigen::MatrixXd coeff = normal_eq.ldlt().solve(e.transpose());  // 2 x deg
    std::complex<double> self(0.0, 0.0);
    for (long r = 0; r < deg; ++r) {
      const std::complex<double> c(coeff(0, r), coeff(1, r));
      gtrips.emplace_back(i, ring[r], c);
      self -= c;
    }
    gtrips.emplace_back(i, i, self);
  }
  ops.grad.resize(n, n);
  ops.grad.setFromTriplets(gtrips.begin(), gtrips.end());
  ops.grad_re = ops.grad.real();
  ops.grad_im = ops.grad.imag();

  // Connection Laplacian: cotangent weights times unit transport phases.
  std::vector<Eigen::Triplet<std::complex<double>>> ctrips;
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  for (const auto& [e, w] : weights) {
    const int i = e[0], j = e[1];
    const double rho = transport_angle(ops.frames, j, i);  // j -> i
    const std::complex<double> r_ij = std::polar(1.0, rho);
    ctrips.emplace_back(i, j, -w * r_ij);
    ctrips.emplace_back(j, i, -w * std::conj(r_ij));
    diag[i] += w;
    diag[j] += w;
  }
  for (int i = 0; i < n; ++i) ctrips.emplace_back(i, i, std::complex<double>(diag[i], 0.0));
  ops.conn.resize(n, n);
  ops.conn.setFromTriplets(ctrips.begin(), ctrips.end());
  return ops;
}

SpectralBasis eig_generalized(const SparseMatrix& stiffness, const Eigen::VectorXd& mass, int k,
                              const EigsOptions& options) {
  EigsResult r = eigs_shift_invert(stiffness, mass, k, options);
  return SpectralBasis{std::move(r.vectors), std::move(r.values), mass};
}

ConnectionBasis eig_connection(const ComplexSparse& conn, const Eigen::VectorXd& mass, int k,
                               const EigsOptions& options) {
  const long n = conn.rows();
  if (k < 1 || k > n) throw DataError("eig_connection: k must lie in [1, n]");
  const SparseMatrix embedded = real_embedding(conn);
  Eigen::VectorXd mass2(2 * n);
  mass2 << mass, mass;
  EigsOptions opt = options;
  opt.block_size = std::max(2 * options.block_size, 2);
  const int k_real = static_cast<int>(std::min<long>(2 * n, 2L * k + 2));
  const EigsResult real = eigs_shift_invert(embedded, mass2, k_real, opt);

  // Each complex eigenvector z appears as [Re z; Im z] and [-Im z; Re z];
  // both map to complex-parallel vectors, so Gram-Schmidt in the complex
  // M-inner product keeps one representative per pair.
  std::vector<Eigen::VectorXcd> kept;
  for (int c = 0; c < real.vectors.cols(); ++c) {
    Eigen::VectorXcd z(n);
    for (long i = 0; i < n; ++i) z[i] = {real.vectors(i, c), real.vectors(i + n, c)};
    auto inner = [&](const Eigen::VectorXcd& a, const Eigen::VectorXcd& b) {
      return (a.conjugate().array() * mass.array() * b.array()).sum();
    };
    const double before = std::sqrt(std::abs(inner(z, z)));
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& q : kept) z -= q * inner(q, z);
    }
    const double after = std::sqrt(std::abs(inner(z, z)));
    if (after > 0.3 * before) kept.push_back(z / after);
  }
  if (static_cast<int>(kept.size()) < k) {
    throw NumericalError("eig_connection: only " + std::to_string(kept.size()) +
                         " independent complex eigenvectors recovered");
  }
  Eigen::MatrixXcd z(n, static_cast<long>(kept.size()));
  for (std::size_t j = 0; j < kept.size(); ++j) z.col(static_cast<long>(j)) = kept[j];

  // Complex Rayleigh-Ritz inside the recovered subspace.
  Eigen::MatrixXcd h = z.adjoint() * (conn * z);
  h = 0.5 * (h + h.adjoint()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(h);
  const Eigen::MatrixXcd psi = z * es.eigenvectors();

  ConnectionBasis out;
  out.mass = mass;
  out.evals = es.eigenvalues().head(k);
  out.evecs = psi.leftCols(k);
  for (int j = 0; j < k; ++j) {
    Eigen::Index idx = 0;
    out.evecs.col(j).cwiseAbs().maxCoeff(&idx);
    const std::complex<double> p = out.evecs(idx, j);
    out.evecs.col(j) *= std::conj(p) / std::abs(p);
    out.evecs(idx, j) = std::abs(out.evecs(idx, j));
  }
  return out;
}

Eigen::MatrixXd heat_diffuse(const SpectralBasis& basis, const Eigen::MatrixXd& u, const Eigen::VectorXd& t) {
  if (u.rows() != basis.evecs.rows()) throw DataError("heat_diffuse: row count does not match the basis");
  if (t.size() == 0 || u.cols() % t.size() != 0) throw DataError("heat_diffuse: time count must divide columns");
  if ((t.array() < 0.0).any()) throw DataError("heat_diffuse: diffusion times must be nonnegative");
  Eigen::MatrixXd coeff = basis.evecs.transpose() * (basis.mass.asDiagonal() * u);
  for (long j = 0; j < coeff.cols(); ++j) {
    const double tj = t[j % t.size()];
    coeff.col(j).array() *= (-basis.evals.array() * tj).exp();
  }
  return basis.evecs * coeff;
}

Eigen::MatrixXd spectral_descriptors(const SpectralBasis& basis, DescriptorKind kind, int count) {
  if (count < 1) throw DataError("spectral_descriptors: descriptor count must be >= 1");
  if (basis.size() < 2) throw DataError("spectral_descriptors: basis needs at least 2 eigenpairs");
  const long n = basis.evecs.rows();
  const Eigen::MatrixXd phi2 = basis.evecs.array().square();
  Eigen::MatrixXd desc(n, count);
  const double lmin = std::max(basis.evals[1], 1e-12);
  const double lmax = std::max(basis.evals[basis.size() - 1], lmin * (1.0 + 1e-9));
  if (kind == DescriptorKind::kHks) {
    const double tmin = 4.0 * std::log(10.0) / lmax;
    const double tmax = 4.0 * std::log(10.0) / lmin;
    for (int d = 0; d < count; ++d) {
      const double s = count == 1 ? 0.0 : static_cast<double>(d) / (count - 1);
      const double t = std::exp(std::log(tmin) + s * (std::log(tmax) - std::log(tmin)));
      desc.col(d) = phi2 * (-basis.evals.array() * t).exp().matrix();
    }
  } else {
    const double emin = std::log(lmin), emax = std::log(lmax);
    const double sigma = 7.0 * (emax - emin) / count;
    const double lo = emin + 2.0 * sigma, hi = emax - 2.0 * sigma;
    Eigen::VectorXd loge(basis.size());
    for (int i = 0; i < basis.size(); ++i) loge[i] = std::log(std::max(basis.evals[i], 1e-12));
    for (int d = 0; d < count; ++d) {
      const double s = count == 1 ? 0.5 : static_cast<double>(d) / (count - 1);
      const double e = lo + s * (hi - lo);
      Eigen::VectorXd w = (-(e - loge.array()).square() / (2.0 * sigma * sigma)).exp();
      w[0] = 0.0;  // constant mode carries no energy band
      const double wsum = w.sum();
      desc.col(d) = phi2 * w / std::max(wsum, 1e-300);
    }
  }
  for (int d = 0; d < count; ++d) {
    const double l1 = basis.mass.dot(desc.col(d).cwiseAbs());
    if (l1 > 0.0) desc.col(d) /= l1;
  }
  return desc;
}

int effective_basis_size(int requested, int num_vertices, std::vector<std::string>* warnings) {
  if (requested < 1) throw UsageError("basis size must be >= 1");
  const int cap = std::max(1, num_vertices / 2);
  if (requested > cap) {
    if (warnings) {
      warnings->push_back("basis size reduced from " + std::to_string(requested) + " to " + std::to_string(cap) +
                          " (mesh has " + std::to_string(num_vertices) + " vertices)");
    }
    return cap;
  }
  return requested;
}

ShapeBundle build_shape_bundle(const Mesh& mesh, int k, int k_q) {
  ShapeBundle b;
  b.ops = build_operators(mesh);
  const int kk = effective_basis_size(k, mesh.num_vertices(), &b.ops.warnings);
  const int kq = effective_basis_size(k_q, mesh.num_vertices(), &b.ops.warnings);
  b.basis = eig_generalized(b.ops.stiffness, b.ops.mass, kk);
  b.conn_basis = eig_connection(b.ops.conn, b.ops.mass, kq);
  return b;
}

Digest operator_cache_key(const Mesh& mesh, int k, int k_q) {
  ContentHasher h;
  h.add_string("rino-operators");
  h.add_u64(static_cast<std::uint64_t>(mesh.num_vertices()));
  h.add_u64(static_cast<std::uint64_t>(mesh.num_triangles()));
  for (long i = 0; i < mesh.vertices().rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double x = mesh.vertices()(i, c);
      h.add_doubles(&x, 1);
    }
  }
  for (long f = 0; f < mesh.triangles().rows(); ++f) {
    for (int c = 0; c < 3; ++c) h.add_u64(static_cast<std::uint64_t>(mesh.triangles()(f, c)));
  }
  h.add_u64(static_cast<std::uint64_t>(k));
  h.add_u64(static_cast<std::uint64_t>(k_q));
  h.add_u64(kOperatorBuildVersion);
  return h.finish();
}

void cache_store(const std::filesystem::path& path, const Digest& key, const ShapeBundle& b) {
  ArrayArchive a;
  a.version = kOperatorBuildVersion;
  a.hash = key;
  a.put_vector("mass", b.ops.mass);
  a.put_sparse("stiffness", b.ops.stiffness);
  a.put_matrix("frames.normal", b.ops.frames.normal);
  a.put_matrix("frames.t1", b.ops.frames.t1);
  a.put_matrix("frames.t2", b.ops.frames.t2);
  a.put_complex_sparse("grad", b.ops.grad);
  a.put_complex_sparse("conn", b.ops.conn);
  a.put_matrix("basis.evecs", b.basis.evecs);
  a.put_vector("basis.evals", b.basis.evals);
  a.put_complex_matrix("conn_basis.evecs", b.conn_basis.evecs);
  a.put_vector("conn_basis.evals", b.conn_basis.evals);
  a.save(path);
}

CacheLookup cache_load(const std::filesystem::path& path, const Digest& key) {
  CacheLookup out;
  if (!std::filesystem::exists(path)) {
    out.diagnostic = "no cache file at '" + path.string() + "'";
    return out;
  }
  const ArrayArchive a = ArrayArchive::load(path);
  if (a.version != kOperatorBuildVersion) {
    out.diagnostic = "cache version " + std::to_string(a.version) + " does not match build version " +
                     std::to_string(kOperatorBuildVersion);
    return out;
  }
  if (a.hash != key) {
    out.diagnostic = "cache content hash " + to_hex(a.hash) + " does not match " + to_hex(key);
    return out;
  }
  ShapeBundle b;
  b.ops.mass = a.get_vector("mass");
  b.ops.stiffness = a.get_sparse("stiffness");
  b.ops.frames = {a.get_matrix("frames.normal"), a.get_matrix("frames.t1"), a.get_matrix("frames.t2")};
  b.ops.grad = a.get_complex_sparse("grad");
  b.ops.grad_re = b.ops.grad.real();
  b.ops.grad_im = b.ops.grad.imag();
  b.ops.conn = a.get_complex_sparse("conn");
  b.basis = {a.get_matrix("basis.evecs"), a.get_vector("basis.evals"), b.ops.mass};
  b.conn_basis = {a.get_complex_matrix("conn_basis.evecs"), a.get_vector("conn_basis.evals"), b.ops.mass};
  out.bundle = std::move(b);
  return out;
}

}  // namespace rino
