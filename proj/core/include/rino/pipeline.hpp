#pragma once

#include "rino/config.hpp"
#include "rino/mesh.hpp"
#include "rino/operators.hpp"
#include "rino/rinonet.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace rino {

struct BundleSource {
  bool cache_hit = false;
  std::vector<std::string> messages;  ///< cache diagnostics and operator warnings
};

/// Cache file of a mesh inside `cache_dir`, named by its content key.
std::filesystem::path cache_file_for(const std::filesystem::path& cache_dir, const Mesh& mesh, int k, int k_q);

/// Operators and bases from the cache when a valid entry exists, otherwise
/// built and stored. An empty `cache_dir` disables caching. A corrupted entry
/// is rebuilt and reported in `source`.
ShapeBundle cached_bundle(const Mesh& mesh, int k, int k_q, const std::filesystem::path& cache_dir,
                          BundleSource* source = nullptr);

/// Reads a mesh and rescales it to unit area about its centroid.
Mesh load_normalized_mesh(const std::filesystem::path& path);

/// Network input for a (normalized) mesh under a run configuration.
ShapeData shape_for(const Mesh& mesh, const RunConfig& config, BundleSource* source = nullptr);

}  // namespace rino
