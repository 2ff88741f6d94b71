#include "rino/mesh.hpp"

#include "rino/error.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <queue>
#include <random>

namespace rino {

Mesh::Mesh(Points vertices, Triangles triangles, IndexMap labels)
    : vertices_(std::move(vertices)), triangles_(std::move(triangles)), labels_(std::move(labels)) {
  const long n = vertices_.rows();
  if (!vertices_.allFinite()) throw DataError("mesh has NaN or infinite coordinates");
  for (long f = 0; f < triangles_.rows(); ++f) {
    for (int c = 0; c < 3; ++c) {
      if (triangles_(f, c) < 0 || triangles_(f, c) >= n) {
        throw DataError("triangle " + std::to_string(f) + " references vertex " +
                        std::to_string(triangles_(f, c)) + " out of range [0, " + std::to_string(n) + ")");
      }
    }
    if (triangles_(f, 0) == triangles_(f, 1) || triangles_(f, 1) == triangles_(f, 2) ||
        triangles_(f, 0) == triangles_(f, 2)) {
      throw DataError("triangle " + std::to_string(f) + " repeats a vertex index");
    }
  }
  if (!labels_.empty() && static_cast<long>(labels_.size()) != n) {
    throw DataError("label count does not match vertex count");
  }
  if (!(total_area() > 0.0)) throw DataError("mesh has zero total area");
}

Eigen::VectorXd Mesh::triangle_areas() const {
  Eigen::VectorXd a(triangles_.rows());
  for (long f = 0; f < triangles_.rows(); ++f) {
    const Eigen::Vector3d p0 = vertices_.row(triangles_(f, 0));
    const Eigen::Vector3d p1 = vertices_.row(triangles_(f, 1));
    const Eigen::Vector3d p2 = vertices_.row(triangles_(f, 2));
    a[f] = 0.5 * (p1 - p0).cross(p2 - p0).norm();
  }
  return a;
}

double Mesh::total_area() const { return triangle_areas().sum(); }

Eigen::Vector3d Mesh::area_weighted_centroid() const {
  const Eigen::VectorXd a = triangle_areas();
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  for (long f = 0; f < triangles_.rows(); ++f) {
    const Eigen::Vector3d tri_c =
        (vertices_.row(triangles_(f, 0)) + vertices_.row(triangles_(f, 1)) + vertices_.row(triangles_(f, 2))) / 3.0;
    c += a[f] * tri_c;
  }
  return c / a.sum();
}

Mesh Mesh::with_vertices(Points vertices) const {
  if (vertices.rows() != vertices_.rows()) throw DataError("vertex count mismatch");
  return Mesh(std::move(vertices), triangles_, labels_);
}

Mesh Mesh::with_labels(IndexMap labels) const { return Mesh(vertices_, triangles_, std::move(labels)); }

Mesh normalize_unit_area(const Mesh& mesh) {
  const double area = mesh.total_area();
  if (!(area > 0.0)) throw DataError("cannot normalize a degenerate mesh (area 0)");
  const Eigen::RowVector3d c = mesh.area_weighted_centroid().transpose();
  Points v = (mesh.vertices().rowwise() - c) / std::sqrt(area);
  return mesh.with_vertices(std::move(v));
}

Mesh transformed(const Mesh& mesh, const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation) {
  Points v = (mesh.vertices() * rotation.transpose()).rowwise() + translation.transpose();
  return mesh.with_vertices(std::move(v));
}

Mesh permuted(const Mesh& mesh, const IndexMap& perm) {
  const int n = mesh.num_vertices();
  if (static_cast<int>(perm.size()) != n) throw DataError("permutation size mismatch");
  std::vector<int> inverse(static_cast<std::size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    if (perm[i] < 0 || perm[i] >= n || inverse[perm[i]] != -1) throw DataError("not a permutation");
    inverse[perm[i]] = i;
  }
  Points v(n, 3);
  for (int i = 0; i < n; ++i) v.row(i) = mesh.vertices().row(perm[i]);
  Triangles t = mesh.triangles();
  for (long f = 0; f < t.rows(); ++f) {
    for (int c = 0; c < 3; ++c) t(f, c) = inverse[t(f, c)];
  }
  IndexMap labels;
  if (!mesh.labels().empty()) {
    labels.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[i] = mesh.labels()[perm[i]];
  }
  return Mesh(std::move(v), std::move(t), std::move(labels));
}

std::vector<std::array<int, 2>> unique_edges(const Mesh& mesh) {
  std::vector<std::array<int, 2>> edges;
  const auto& t = mesh.triangles();
  edges.reserve(static_cast<std::size_t>(t.rows()) * 3);
  for (long f = 0; f < t.rows(); ++f) {
    for (int c = 0; c < 3; ++c) {
      int a = t(f, c), b = t(f, (c + 1) % 3);
      if (a > b) std::swap(a, b);
      edges.push_back({a, b});
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

GeodesicField geodesic_distances(const Mesh& mesh, int source) {
  const int n = mesh.num_vertices();
  if (source < 0 || source >= n) {
    throw DataError("geodesic source " + std::to_string(source) + " out of range");
  }
  std::vector<std::vector<std::pair<int, double>>> adj(static_cast<std::size_t>(n));
  for (const auto& e : unique_edges(mesh)) {
    const double w = (mesh.vertices().row(e[0]) - mesh.vertices().row(e[1])).norm();
    adj[e[0]].emplace_back(e[1], w);
    adj[e[1]].emplace_back(e[0], w);
  }
  GeodesicField field;
  field.source = source;
  field.dist = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  field.dist[source] = 0.0;
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  heap.emplace(0.0, source);
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > field.dist[u]) continue;
    for (auto [v, w] : adj[u]) {
      if (d + w < field.dist[v]) {
        field.dist[v] = d + w;
        heap.emplace(field.dist[v], v);
      }
    }
  }
  field.all_reachable = field.dist.allFinite();
  return field;
}

namespace {

// Exact k-d tree search. Candidates are ordered by (squared distance, index)
// so that ties resolve to the lower index regardless of traversal order.
class KdTree {
 public:
  explicit KdTree(const Points& pts) : pts_(pts), order_(static_cast<std::size_t>(pts.rows())) {
    std::iota(order_.begin(), order_.end(), 0);
    nodes_.reserve(order_.size());
    if (!order_.empty()) root_ = build(0, static_cast<int>(order_.size()), 0);
  }

  std::vector<int> query(int self, int k) const {
    std::vector<std::pair<double, int>> best;  // max-heap on (d2, idx)
    search(root_, self, k, best);
    std::sort(best.begin(), best.end());
    std::vector<int> out;
    out.reserve(best.size());
    for (const auto& b : best) out.push_back(b.second);
    return out;
  }

 private:
  struct Node {
    int begin, end, axis = -1;
    double split = 0.0;
    int left = -1, right = -1;
  };
  static constexpr int kLeaf = 8;

  int build(int begin, int end, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back({begin, end});
    if (end - begin <= kLeaf) return id;
    Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
    Eigen::Vector3d hi = -lo;
    for (int i = begin; i < end; ++i) {
      lo = lo.cwiseMin(pts_.row(order_[i]).transpose());
      hi = hi.cwiseMax(pts_.row(order_[i]).transpose());
    }
    int axis;
    (hi - lo).maxCoeff(&axis);
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) { return pts_(a, axis) < pts_(b, axis); });
    nodes_[id].axis = axis;
    nodes_[id].split = pts_(order_[mid], axis);
    (void)depth;
    const int l = build(begin, mid, depth + 1);
    const int r = build(mid, end, depth + 1);
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void search(int id, int self, int k, std::vector<std::pair<double, int>>& best) const {
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int j = order_[i];
        if (j == self) continue;
        const double d2 = (pts_.row(j) - pts_.row(self)).squaredNorm();
        const std::pair<double, int> cand{d2, j};
        if (static_cast<int>(best.size()) < k) {
          best.push_back(cand);
          std::push_heap(best.begin(), best.end());
        } else if (cand < best.front()) {
          std::pop_heap(best.begin(), best.end());
          best.back() = cand;
          std::push_heap(best.begin(), best.end());
        }
      }
      return;
    }
    const double delta = pts_(self, node.axis) - node.split;
    const int near = delta < 0 ? node.left : node.right;
    const int far = delta < 0 ? node.right : node.left;
    search(near, self, k, best);
    // Points equal to the split value can sit on either side, so the far side
    // is visited on ties as well.
    if (static_cast<int>(best.size()) < k || delta * delta <= best.front().first) {
      search(far, self, k, best);
    }
  }

  const Points& pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = 0;
};

}  // namespace

std::vector<std::vector<int>> knn_graph(const Points& points, int k) {
  const int n = static_cast<int>(points.rows());
  if (k < 1 || k >= n) {
    throw DataError("knn_graph requires 1 <= k < n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
  }
  KdTree tree(points);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[i] = tree.query(i, k);
  return out;
}

Mesh perturb_gaussian(const Mesh& mesh, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw DataError("noise sigma must be nonnegative");
  if (sigma == 0.0) return mesh;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma);
  Points v = mesh.vertices();
  for (long i = 0; i < v.rows(); ++i) {
    for (int c = 0; c < 3; ++c) v(i, c) += noise(rng);
  }
  return mesh.with_vertices(std::move(v));
}

}  // namespace rino
