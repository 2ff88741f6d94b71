#include "rino/synthetic.hpp"

#include "rino/error.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace rino {
namespace {

using Key = std::array<long long, 3>;

Key rounded_key(const Eigen::Vector3d& p) {
  return {std::llround(p.x() * 1e9), std::llround(p.y() * 1e9), std::llround(p.z() * 1e9)};
}

void check(bool ok, const std::string& what) {
  if (!ok) throw UsageError("invalid synthetic parameter: " + what);
}

// Mirror map x -> -x on an icosphere, found by exact coordinate lookup.
IndexMap mirror_map(const Points& unit_sphere) {
  std::map<Key, int> lookup;
  for (long i = 0; i < unit_sphere.rows(); ++i) lookup[rounded_key(unit_sphere.row(i))] = static_cast<int>(i);
  IndexMap sym(static_cast<std::size_t>(unit_sphere.rows()));
  for (long i = 0; i < unit_sphere.rows(); ++i) {
    Eigen::Vector3d m = unit_sphere.row(i);
    m.x() = -m.x();
    auto it = lookup.find(rounded_key(m));
    if (it == lookup.end()) throw NumericalError("icosphere is not mirror symmetric");
    sym[i] = it->second;
  }
  return sym;
}

IndexMap identity_labels(int n) {
  IndexMap l(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) l[i] = i;
  return l;
}

Mesh bent_bar(const SyntheticParams& p) {
  check(p.length > 0 && p.bar_radius > 0, "bar length and radius must be positive");
  check(p.bend_angle >= 0.0 && p.bend_angle <= std::numbers::pi / 2 + 1e-12, "bend angle must lie in [0, pi/2]");
  check(p.segments >= 2 && p.ring_vertices >= 3, "bar needs >= 2 segments and >= 3 ring vertices");
  check(p.taper > -0.9 && p.bump_height >= 0.0, "taper must exceed -0.9 and bump height be nonnegative");
  const int rings = p.segments + 1;
  const int rv = p.ring_vertices;
  const int n = rings * rv + 2;
  Points straight(n, 3);
  auto bump = [&](double s, double phi) {
    const double dphi = std::remainder(phi - 0.8, 2.0 * std::numbers::pi);
    return p.bump_height * std::exp(-((s - 0.7) * (s - 0.7)) / (0.1 * 0.1) - dphi * dphi / (0.7 * 0.7));
  };
  for (int i = 0; i < rings; ++i) {
    const double s = static_cast<double>(i) / p.segments;
    for (int j = 0; j < rv; ++j) {
      const double phi = 2.0 * std::numbers::pi * j / rv;
      const double r = p.bar_radius * (1.0 + p.taper * s) * (1.0 + bump(s, phi));
      straight.row(i * rv + j) << s * p.length, r * std::cos(phi), r * std::sin(phi);
    }
  }
  // Cap centres sit slightly outside the end rings.
  straight.row(n - 2) << -0.5 * p.bar_radius, 0.0, 0.0;
  straight.row(n - 1) << p.length + 0.5 * p.bar_radius * (1.0 + p.taper), 0.0, 0.0;

  Points v(n, 3);
  if (p.bend_angle == 0.0) {
    v = straight;
  } else {
    // Wrap the centreline onto a circular arc in the x-y plane; cross
    // sections stay rigid and perpendicular to the arc.
    const double rc = p.length / p.bend_angle;
    for (int i = 0; i < n; ++i) {
      const double x = straight(i, 0), y = straight(i, 1), z = straight(i, 2);
      const double a = x / rc;
      const Eigen::Vector3d centre(rc * std::sin(a), rc * (1.0 - std::cos(a)), 0.0);
      const Eigen::Vector3d normal(-std::sin(a), std::cos(a), 0.0);
      v.row(i) = (centre + y * normal + Eigen::Vector3d(0, 0, z)).transpose();
    }
  }

  Triangles t(2 * p.segments * rv + 2 * rv, 3);
  int f = 0;
  for (int i = 0; i < p.segments; ++i) {
    for (int j = 0; j < rv; ++j) {
      const int a = i * rv + j, b = i * rv + (j + 1) % rv;
      const int c = (i + 1) * rv + (j + 1) % rv, d = (i + 1) * rv + j;
      t.row(f++) << a, b, c;
      t.row(f++) << a, c, d;
    }
  }
  for (int j = 0; j < rv; ++j) {
    t.row(f++) << n - 2, (j + 1) % rv, j;
    const int base = p.segments * rv;
    t.row(f++) << n - 1, base + j, base + (j + 1) % rv;
  }
  return Mesh(std::move(v), std::move(t), identity_labels(n));
}

}  // namespace

SyntheticKind synthetic_kind_from_string(std::string_view name) {
  if (name == "sphere") return SyntheticKind::kSphere;
  if (name == "ellipsoid") return SyntheticKind::kEllipsoid;
  if (name == "bent_bar") return SyntheticKind::kBentBar;
  if (name == "sym_blob") return SyntheticKind::kSymBlob;
  throw UsageError("unknown synthetic kind '" + std::string(name) + "'");
}

Mesh icosphere(int subdivisions, double radius) {
  check(subdivisions >= 0 && subdivisions <= 7, "subdivisions must lie in [0, 7]");
  check(radius > 0, "radius must be positive");
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> v = {
      {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0}, {0, -1, phi}, {0, 1, phi},
      {0, -1, -phi}, {0, 1, -phi}, {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
      {11, 10, 2}, {10, 7, 6}, {7, 1, 8}, {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8},
      {3, 8, 9}, {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back(((v[a] + v[b]) * 0.5).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      const int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  Points pts(static_cast<long>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i) pts.row(static_cast<long>(i)) = radius * v[i].transpose();
  Triangles tri(static_cast<long>(faces.size()), 3);
  for (std::size_t f = 0; f < faces.size(); ++f) tri.row(static_cast<long>(f)) << faces[f][0], faces[f][1], faces[f][2];
  return Mesh(std::move(pts), std::move(tri), identity_labels(static_cast<int>(v.size())));
}

SyntheticShape gen_synthetic(SyntheticKind kind, const SyntheticParams& params, std::uint64_t seed) {
  check(params.jitter >= 0.0 && params.jitter < 0.5, "jitter must lie in [0, 0.5)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  SyntheticShape out;
  switch (kind) {
    case SyntheticKind::kSphere:
    case SyntheticKind::kEllipsoid: {
      const Mesh base = icosphere(params.subdivisions, 1.0);
      Eigen::Vector3d axes = Eigen::Vector3d::Constant(params.radius);
      if (kind == SyntheticKind::kEllipsoid) {
        check((params.axes.array() > 0).all(), "ellipsoid axes must be positive");
        axes = params.axes;
      }
      Points v = base.vertices();
      for (long i = 0; i < v.rows(); ++i) {
        const double r = 1.0 + params.jitter * unit(rng);
        v.row(i) = (v.row(i).transpose().cwiseProduct(axes) * r).transpose();
      }
      out.mesh = base.with_vertices(std::move(v));
      return out;
    }
    case SyntheticKind::kBentBar:
      out.mesh = bent_bar(params);
      return out;
    case SyntheticKind::kSymBlob: {
      check(params.bump_pairs >= 0 && params.bump_amplitude > -0.9, "invalid bump configuration");
      const Mesh base = icosphere(params.subdivisions, 1.0);
      const IndexMap sym = mirror_map(base.vertices());
      std::vector<Eigen::Vector3d> centres;
      std::vector<double> amps;
      for (int b = 0; b < params.bump_pairs; ++b) {
        Eigen::Vector3d c(0.3 + 0.7 * std::abs(unit(rng)), unit(rng), unit(rng));
        c.normalize();
        const double a = params.bump_amplitude * (0.6 + 0.4 * std::abs(unit(rng)));
        centres.push_back(c);
        centres.emplace_back(-c.x(), c.y(), c.z());
        amps.push_back(a);
        amps.push_back(a);
      }
      // One bump on the symmetry plane breaks the remaining extrinsic symmetries.
      centres.push_back(Eigen::Vector3d(0.0, 0.6, 0.8).normalized());
      amps.push_back(params.bump_amplitude);
      std::vector<double> jitter(static_cast<std::size_t>(base.num_vertices()));
      for (int i = 0; i < base.num_vertices(); ++i) jitter[i] = params.jitter * unit(rng);
      Points v = base.vertices();
      for (long i = 0; i < v.rows(); ++i) {
        const Eigen::Vector3d p = base.vertices().row(i);
        double r = params.radius * (1.0 + jitter[std::min<long>(i, sym[i])]);
        for (std::size_t b = 0; b < centres.size(); ++b) {
          r += params.radius * amps[b] * std::exp(-(p - centres[b]).squaredNorm() / 0.25);
        }
        v.row(i) = r * p.transpose();
      }
      out.mesh = base.with_vertices(std::move(v));
      out.symmetry = sym;
      return out;
    }
  }
  throw UsageError("unknown synthetic kind");
}

}  // namespace rino
