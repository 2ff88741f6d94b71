#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rino {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using Triangles = Eigen::Matrix<int, Eigen::Dynamic, 3>;
using IndexMap = std::vector<int>;

/// Triangle mesh. Validated on construction and immutable afterwards.
///
/// Non-manifold connectivity is accepted: the only structural checks are index
/// bounds, repeated indices inside a triangle, finite coordinates and a
/// positive total area.
class Mesh {
 public:
  Mesh() = default;
  Mesh(Points vertices, Triangles triangles, IndexMap labels = {});

  const Points& vertices() const { return vertices_; }
  const Triangles& triangles() const { return triangles_; }
  /// Per-vertex ground-truth labels; empty when none were attached.
  const IndexMap& labels() const { return labels_; }

  int num_vertices() const { return static_cast<int>(vertices_.rows()); }
  int num_triangles() const { return static_cast<int>(triangles_.rows()); }

  Eigen::VectorXd triangle_areas() const;
  double total_area() const;
  Eigen::Vector3d area_weighted_centroid() const;

  Mesh with_vertices(Points vertices) const;
  Mesh with_labels(IndexMap labels) const;

 private:
  Points vertices_;
  Triangles triangles_;
  IndexMap labels_;
};

enum class MeshFormat { kOff, kObj, kPly };
enum class PlyEncoding { kAscii, kBinaryLittleEndian };

MeshFormat format_from_path(const std::filesystem::path& path);

/// Parses ASCII OFF, ASCII OBJ (v/f records) or PLY (ASCII or
/// binary_little_endian). Errors name the line (text) or byte offset (binary).
Mesh parse_mesh(std::string_view bytes, MeshFormat format);

/// Writes vertices with shortest round-trip decimal representation, so that
/// parse(serialize(m)) reproduces m bit-for-bit.
std::string serialize_mesh(const Mesh& mesh, MeshFormat format,
                           PlyEncoding encoding = PlyEncoding::kAscii);

/// PLY with per-vertex uchar red/green/blue properties.
std::string serialize_colored_ply(const Mesh& mesh,
                                  const std::vector<std::array<std::uint8_t, 3>>& colors,
                                  PlyEncoding encoding = PlyEncoding::kAscii);

Mesh read_mesh(const std::filesystem::path& path);
void write_mesh(const Mesh& mesh, const std::filesystem::path& path,
                PlyEncoding encoding = PlyEncoding::kAscii);

/// Plain text, one 0-based index per line.
IndexMap read_index_file(const std::filesystem::path& path);
void write_index_file(const IndexMap& map, const std::filesystem::path& path);
IndexMap parse_index_text(std::string_view text);
std::string format_index_text(const IndexMap& map);

/// Translates to the area-weighted centroid and scales to unit total area.
Mesh normalize_unit_area(const Mesh& mesh);

/// Applies x -> R x + t to every vertex.
Mesh transformed(const Mesh& mesh, const Eigen::Matrix3d& rotation,
                 const Eigen::Vector3d& translation = Eigen::Vector3d::Zero());

/// Relabels vertices: new vertex i is old vertex perm[i]. Labels follow.
Mesh permuted(const Mesh& mesh, const IndexMap& perm);

/// Unique undirected edges (i < j), sorted lexicographically.
std::vector<std::array<int, 2>> unique_edges(const Mesh& mesh);

struct GeodesicField {
  int source = 0;
  /// +infinity marks vertices unreachable from the source.
  Eigen::VectorXd dist;
  bool all_reachable = true;
};

/// Dijkstra over the edge graph with Euclidean edge weights.
GeodesicField geodesic_distances(const Mesh& mesh, int source);

/// Euclidean k nearest neighbours of every point, excluding the point itself.
/// Ties are broken towards the lower index. Rows are ordered by distance.
std::vector<std::vector<int>> knn_graph(const Points& points, int k);

/// Adds i.i.d. N(0, sigma^2) to every coordinate. sigma is a standard
/// deviation in the mesh's length units.
Mesh perturb_gaussian(const Mesh& mesh, double sigma, std::uint64_t seed);

}  // namespace rino
